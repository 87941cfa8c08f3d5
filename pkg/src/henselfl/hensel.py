"""Lossless block packing of base-p digit matrices ("Hensel compression").

Every ``block_rows x block_cols`` sub-block of a digit matrix is read in
row-major order and folded into a single integer

    value = d_0 + d_1 * p + d_2 * p**2 + ... + d_{B-1} * p**(B-1)

so the top-left digit is the least significant one.  Because base-p
expansions are unique, the map is a bijection from ``[0, p)**B`` onto
``[0, p**B)`` and ``decompress_matrix`` recovers the input exactly.

Packed values are held as ``uint64`` while ``p**B - 1`` fits in 64 bits and
as Python ``int`` objects beyond that, so nothing ever overflows.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image_batch, check_integral, check_positive_int
from .exceptions import CorruptionError, DomainError, ShapeError

_UINT64_MAX = 2**64 - 1


@dataclass(frozen=True)
class CompressionConfig:
    base: int
    block_rows: int = 1
    block_cols: int = 1

    def __post_init__(self):
        check_positive_int(self.base, "base", minimum=2)
        check_positive_int(self.block_rows, "block_rows")
        check_positive_int(self.block_cols, "block_cols")

    @property
    def block_size(self):
        return self.block_rows * self.block_cols

    @property
    def capacity(self):
        """Number of representable packed values, ``p**B``."""
        return self.base**self.block_size

    @property
    def packed_dtype(self):
        return np.dtype(np.uint64) if self.capacity - 1 <= _UINT64_MAX else np.dtype(object)

    def reduced_shape(self, rows, cols):
        if rows % self.block_rows or cols % self.block_cols:
            raise ShapeError(
                f"matrix of shape {rows}x{cols} cannot be tiled by "
                f"{self.block_rows}x{self.block_cols} blocks (n={rows}, m={cols}, "
                f"n'={self.block_rows}, m'={self.block_cols})"
            )
        return rows // self.block_rows, cols // self.block_cols


@dataclass(frozen=True)
class PackedMatrix:
    """A reduced matrix whose entries are packed blocks, plus the config that made it."""

    values: np.ndarray
    config: CompressionConfig

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    @property
    def source_shape(self):
        return self.rows * self.config.block_rows, self.cols * self.config.block_cols


def pack_block(digits, p):
    """Fold a row-major digit sequence into one base-``p`` integer.

    >>> pack_block([1, 2, 0, 2], 3)
    61
    """
    p = check_positive_int(p, "p", minimum=2)
    digits = list(digits)
    if not digits:
        raise DomainError("a block needs at least one digit")
    value = 0
    for i in reversed(range(len(digits))):
        d = digits[i]
        if not 0 <= d < p or d != int(d):
            raise DomainError(f"digit at index {i} is {d!r}, outside [0, {p})")
        value = value * p + int(d)
    return value


def unpack_block(value, p, B):
    """Return the ``B`` base-``p`` digits of ``value``, least significant first."""
    p = check_positive_int(p, "p", minimum=2)
    B = check_positive_int(B, "B")
    value = int(value)
    if not 0 <= value < p**B:
        raise DomainError(f"value {value} is not representable with {B} base-{p} digits")
    digits = []
    for _ in range(B):
        value, d = divmod(value, p)
        digits.append(d)
    return digits


def _check_digits(M, p):
    M = check_integral(M, "M")
    if M.size == 0:
        return M
    if M.dtype == object:
        flat = M.ravel()
        bad = next((i for i, v in enumerate(flat) if not 0 <= v < p), None)
    else:
        mask = (M < 0) | (M >= p)
        bad = int(np.flatnonzero(mask)[0]) if mask.any() else None
    if bad is not None:
        idx = tuple(int(i) for i in np.unravel_index(bad, M.shape))
        raise DomainError(f"entry {idx} is {M[idx]!r}, outside [0, {p})")
    return M


def _pack(M, config):
    # M: (..., n, m) valid digits -> (..., n/n', m/m')
    *lead, n, m = M.shape
    h, k = config.reduced_shape(n, m)
    r, c, B = config.block_rows, config.block_cols, config.block_size
    blocks = M.reshape(*lead, h, r, k, c).swapaxes(-3, -2).reshape(*lead, h, k, B)
    dtype = config.packed_dtype
    weights = np.array([config.base**i for i in range(B)], dtype=dtype)
    return (blocks.astype(dtype) * weights).sum(axis=-1, dtype=dtype)


def _unpack(values, config):
    *lead, h, k = values.shape
    p, B = config.base, config.block_size
    dtype = config.packed_dtype
    values = values.astype(dtype)
    digits = np.empty((*lead, h, k, B), dtype=np.int64)
    rest = values
    base = dtype.type(p) if dtype != object else p
    for i in range(B):
        digits[..., i] = rest % base
        rest = rest // base
    digits = digits.reshape(*lead, h, k, config.block_rows, config.block_cols)
    return digits.swapaxes(-3, -2).reshape(*lead, h * config.block_rows, k * config.block_cols)


def _check_packed(values, config):
    values = check_integral(values, "packed values")
    if values.size == 0:
        return values
    cap = config.capacity
    if values.dtype == object:
        bad = next((i for i, v in enumerate(values.ravel()) if not 0 <= v < cap), None)
    else:
        mask = values < 0 if np.issubdtype(values.dtype, np.signedinteger) else np.zeros(values.shape, bool)
        if cap <= _UINT64_MAX:
            mask = mask | (values.astype(np.uint64) >= np.uint64(cap))
        bad = int(np.flatnonzero(mask)[0]) if mask.any() else None
    if bad is not None:
        idx = tuple(int(i) for i in np.unravel_index(bad, values.shape))
        raise CorruptionError(f"packed entry {idx} = {values[idx]!r} is outside [0, {cap})")
    return values


def compress_matrix(M, config):
    """Pack every sub-block of the digit matrix ``M`` into one integer.

    Output entry ``(i, j)`` packs the block whose top-left corner is
    ``(i * block_rows, j * block_cols)``.
    """
    M = np.asarray(M)
    if M.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {M.shape}")
    config.reduced_shape(*M.shape)
    M = _check_digits(M, config.base)
    return PackedMatrix(_pack(M, config), config)


def decompress_matrix(packed):
    """Exact inverse of :func:`compress_matrix`."""
    values = _check_packed(np.asarray(packed.values), packed.config)
    if values.ndim != 2:
        raise ShapeError(f"packed values must be 2-D, got shape {values.shape}")
    return _unpack(values, packed.config)


def compress_batch(X, config):
    """Vectorized :func:`compress_matrix` over a stack of matrices."""
    X = np.asarray(X)
    config.reduced_shape(*X.shape[-2:])
    return _pack(_check_digits(X, config.base), config)


def decompress_batch(values, config):
    return _unpack(_check_packed(np.asarray(values), config), config)


class HenselCompressor(TransformerMixin, BaseEstimator):
    """Transformer that packs image blocks of base-``p`` digits.

    Parameters
    ----------
    base : int, default=3
        Digit base ``p``; inputs must lie in ``[0, base)``.
    block_shape : tuple of int, default=(2, 2)
        Sub-block size ``(block_rows, block_cols)``.
    """

    def __init__(self, base=3, block_shape=(2, 2)):
        self.base = base
        self.block_shape = block_shape

    def _config(self):
        rows, cols = self.block_shape
        return CompressionConfig(self.base, rows, cols)

    def fit(self, X, y=None):
        X = check_image_batch(X)
        config = self._config()
        self.input_shape_ = X.shape[1:]
        self.output_shape_ = config.reduced_shape(*self.input_shape_)
        self.config_ = config
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = check_image_batch(X)
        if X.shape[1:] != self.input_shape_:
            raise ShapeError(f"fitted on images of shape {self.input_shape_}, got {X.shape[1:]}")
        return compress_batch(X, self.config_)

    def inverse_transform(self, X):
        check_is_fitted(self, "config_")
        X = check_image_batch(X)
        if X.shape[1:] != tuple(self.output_shape_):
            raise ShapeError(f"expected packed shape {self.output_shape_}, got {X.shape[1:]}")
        return decompress_batch(X, self.config_)
