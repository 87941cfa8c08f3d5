"""Exception types raised across the package.

Each class carries an ``exit_code`` so the CLI can map failures onto
category-coded process exit statuses.
"""


class HenselFLError(Exception):
    exit_code = 1


class ConfigError(HenselFLError, ValueError):
    exit_code = 2


class DomainError(HenselFLError, ValueError):
    """A value lies outside the domain an operation is defined on."""

    exit_code = 4


class ShapeError(HenselFLError, ValueError):
    exit_code = 4


class CorruptionError(HenselFLError, ValueError):
    """A packed value cannot have been produced by the codec."""

    exit_code = 4


class FormatError(HenselFLError, ValueError):
    exit_code = 4


class LengthError(FormatError):
    exit_code = 4


class NumericalError(HenselFLError, ArithmeticError):
    exit_code = 5


class ProtocolError(HenselFLError, RuntimeError):
    exit_code = 6


class AggregationError(ProtocolError):
    pass


class ClientError(ProtocolError):
    def __init__(self, client_id, message):
        super().__init__(f"client {client_id}: {message}")
        self.client_id = client_id
