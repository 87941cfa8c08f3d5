"""Input validation helpers shared by the estimators."""

import numbers

import numpy as np

from .exceptions import DomainError, ShapeError


def check_image_batch(X, name="X"):
    """Return ``X`` as an array of shape (n_samples, rows, cols).

    A single 2-D matrix is promoted to a batch of one.  ``(N, 1, rows, cols)``
    channel-first input is accepted and squeezed.
    """
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[np.newaxis]
    elif X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3:
        raise ShapeError(f"{name} must have shape (n_samples, rows, cols), got {X.shape}")
    if X.shape[1] < 1 or X.shape[2] < 1:
        raise ShapeError(f"{name} has an empty image dimension: {X.shape}")
    return X


def check_unit_interval(X, name="X"):
    """Raise DomainError unless every entry of ``X`` lies in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.size and (not np.all(np.isfinite(X)) or X.min() < 0.0 or X.max() > 1.0):
        bad = np.argwhere(~((X >= 0.0) & (X <= 1.0)))[0]
        raise DomainError(
            f"{name} must be normalized to [0, 1]; entry at {tuple(int(i) for i in bad)} "
            f"is {X[tuple(bad)]!r}"
        )
    return X


def check_integral(X, name="X"):
    """Return ``X`` as an integer (or Python-int object) array."""
    X = np.asarray(X)
    if X.dtype == object:
        for idx, v in np.ndenumerate(X):
            if not isinstance(v, numbers.Integral):
                raise DomainError(f"{name}{list(idx)} is not an integer: {v!r}")
        return X
    if np.issubdtype(X.dtype, np.integer):
        return X
    if np.issubdtype(X.dtype, np.bool_):
        return X.astype(np.int64)
    if np.issubdtype(X.dtype, np.floating):
        if not np.all(np.isfinite(X)) or np.any(X != np.floor(X)):
            raise DomainError(f"{name} must contain integers only")
        return X.astype(np.int64)
    raise DomainError(f"{name} has unsupported dtype {X.dtype}")


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < minimum:
        raise DomainError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
