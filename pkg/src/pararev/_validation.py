"""Input validation helpers shared by the estimator, the CLI and the engine."""

from __future__ import annotations

import numpy as np


class NotFittedError(ValueError, AttributeError):
    """Raised when a prediction method is used before ``fit``."""


def check_same_shape(a, b, what: str = "operands") -> None:
    sa, sb = np.shape(a), np.shape(b)
    if sa != sb:
        raise ValueError(f"{what}: shape mismatch {sa} vs {sb}")


def check_images(X, *, dtype=np.float32, name: str = "X") -> np.ndarray:
    """Return ``X`` as a contiguous finite rank-4 array ``(N, C, H, W)``."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(f"{name} must be rank-4 (batch, channels, height, width); got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"{name} must be numeric, got dtype {X.dtype}")
    X = np.ascontiguousarray(X, dtype=dtype)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or Inf")
    return X


def check_labels(y, n_samples: int, *, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {y.shape}")
    if y.shape[0] != n_samples:
        raise ValueError(f"{name} has {y.shape[0]} labels for {n_samples} samples")
    return y


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_is_fitted(estimator, attribute: str = "network_") -> None:
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call 'fit' first."
        )
