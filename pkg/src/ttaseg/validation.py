"""Input checks shared by the estimators and the harness."""

import numpy as np

from .exceptions import ConfigError, DimensionError, NonFiniteError
from .losses import PRIOR_FLOOR


def check_volumes(X, *, dtype=np.float32):
    """Coerce one volume ``(D, H, W)`` or a stack ``(N, D, H, W)`` /
    ``(N, 1, D, H, W)`` to a finite ``(N, 1, D, H, W)`` array."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None, None]
    elif X.ndim == 4:
        X = X[:, None]
    elif X.ndim != 5:
        raise DimensionError(f"expected 3-, 4- or 5-D volumes, got shape {X.shape}")
    if X.shape[1] != 1:
        raise DimensionError(f"expected a single channel, got {X.shape[1]}")
    if X.shape[0] == 0:
        raise DimensionError("no volumes given")
    if not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"volumes must be numeric, got {X.dtype}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteError("volumes contain NaN or Inf")
    return X.astype(dtype, copy=False)


def check_label_maps(y, volumes, num_classes):
    """Coerce labels to ``(N, D, H, W)`` integers matching ``volumes``."""
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[None]
    expected = (volumes.shape[0],) + volumes.shape[2:]
    if y.shape != expected:
        raise DimensionError(f"labels {y.shape} do not match volumes {expected}")
    if not np.issubdtype(y.dtype, np.integer):
        raise TypeError(f"labels must be integers, got {y.dtype}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ConfigError(f"label values must lie in [0, {num_classes})")
    return y


def check_prior(tau, num_classes, *, tol=1e-6):
    """A class-ratio prior: ``num_classes`` entries, each >= the floor, summing to 1."""
    tau = np.asarray(tau, dtype=np.float64)
    if tau.shape != (num_classes,):
        raise DimensionError(f"prior needs {num_classes} entries, got shape {tau.shape}")
    if not np.all(np.isfinite(tau)):
        raise NonFiniteError("prior contains NaN or Inf")
    if np.any(tau < PRIOR_FLOOR):
        raise ConfigError(f"prior entries must be >= {PRIOR_FLOOR}")
    if abs(tau.sum() - 1.0) > tol:
        raise ConfigError(f"prior must sum to 1, sums to {tau.sum():.8f}")
    return tau
