"""One-shot Gaussian noising of normalized data.

Randomness
----------
All noise comes from numpy's PCG64 bit generator seeded through
``SeedSequence(entropy=[seed, *keys])``, which makes streams splittable by
integer keys (image index, client id, round, ...).  Normal deviates are
produced with the Box-Muller transform on PCG64 doubles::

    u1 = 1 - U[0, 1)          # in (0, 1], so log(u1) is finite
    u2 = U[0, 1)
    z0 = sqrt(-2 ln u1) cos(2 pi u2)
    z1 = sqrt(-2 ln u1) sin(2 pi u2)

Pairs are emitted as ``z0, z1, z0', z1', ...`` and truncated to the
requested count, so ``n`` deviates consume ``ceil(n / 2)`` uniform pairs.
"""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_image_batch, check_unit_interval
from .exceptions import DomainError

# Stream tags used as the first derivation key so unrelated consumers of one
# master seed never share a stream.
STREAM_TRAIN_NOISE = 0
STREAM_TEST_NOISE = 1
STREAM_INIT = 2
STREAM_PARTITION = 3
STREAM_CLIENT = 4
STREAM_NOISER = 5


def seed_sequence(seed, *keys):
    for v in (seed, *keys):
        if int(v) < 0:
            raise DomainError(f"seed material must be non-negative, got {v}")
    return np.random.SeedSequence([int(seed), *(int(k) for k in keys)])


def derive_seed(seed, *keys):
    """Hash ``(seed, *keys)`` to a 64-bit unsigned seed."""
    lo, hi = seed_sequence(seed, *keys).generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def make_generator(seed, *keys):
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


class GaussianStream:
    """Standard-normal source with a running count of deviates drawn."""

    def __init__(self, seed, *keys):
        self._gen = make_generator(seed, *keys)
        self.draws = 0

    def standard_normal(self, shape):
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(theta)
        z[1::2] = radius * np.sin(theta)
        self.draws += n
        return z[:n].reshape(shape)


@dataclass(frozen=True)
class PrivacyParams:
    """Gaussian-mechanism settings.

    ``epsilon`` is the privacy leakage, ``sensitivity`` the data range (1.0
    for data normalized to [0, 1]), ``seed`` a 64-bit unsigned RNG seed.
    """

    epsilon: float
    sensitivity: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise DomainError(f"epsilon must be positive and finite, got {self.epsilon!r}")
        if not (math.isfinite(self.sensitivity) and self.sensitivity > 0):
            raise DomainError(f"sensitivity must be positive and finite, got {self.sensitivity!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")

    def variance(self):
        return self.sensitivity**2 / self.epsilon**2

    def std(self):
        return self.sensitivity / self.epsilon


def gaussian_variance(params):
    """Noise variance ``sensitivity**2 / epsilon**2``."""
    return params.variance()


def add_noise(M, params, rng=None):
    """Perturb every entry of ``M`` with an independent N(0, sigma^2) draw.

    ``M`` must already be normalized to [0, 1]; that is what makes a
    sensitivity of 1 valid.  The result is not clipped.  ``rng`` defaults to
    a fresh :class:`GaussianStream` seeded by ``params.seed``.
    """
    M = check_unit_interval(M, "M")
    if rng is None:
        rng = GaussianStream(params.seed)
    return M + params.std() * rng.standard_normal(M.shape)


def cumulative_leakage(epsilon_per_round, rounds):
    """Privacy leakage after ``rounds`` sequential applications (basic composition)."""
    if isinstance(rounds, bool) or int(rounds) != rounds or rounds < 0:
        raise DomainError(f"rounds must be a non-negative integer, got {rounds!r}")
    return int(rounds) * epsilon_per_round


class GaussianNoiser(TransformerMixin, BaseEstimator):
    """Add one-shot Gaussian noise to a batch of normalized images.

    Sample ``i`` of each ``transform`` call is noised from its own stream
    derived from ``(random_state, stream, i)``, so results do not depend on
    how the batch is split or scheduled.
    """

    def __init__(self, epsilon=2.0, sensitivity=1.0, random_state=0, stream=STREAM_NOISER):
        self.epsilon = epsilon
        self.sensitivity = sensitivity
        self.random_state = random_state
        self.stream = stream

    def fit(self, X, y=None):
        self.params_ = PrivacyParams(self.epsilon, self.sensitivity, self.random_state)
        self.variance_ = self.params_.variance()
        return self

    def transform(self, X):
        params = PrivacyParams(self.epsilon, self.sensitivity, self.random_state)
        X = check_unit_interval(check_image_batch(X))
        out = np.empty_like(X)
        for i, image in enumerate(X):
            out[i] = add_noise(image, params, GaussianStream(params.seed, self.stream, i))
        return out
