"""Scalar objectives and evaluation metrics.

Probability fields are ``(N, C, D, H, W)`` arrays (any trailing spatial
rank works). Voxel reductions are means, so loss weights are comparable
across volume sizes. Logs are natural and clamped at ``LOG_FLOOR``.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DimensionError

LOG_FLOOR = 1e-12
PRIOR_FLOOR = 1e-6


@dataclass
class LossValue:
    """A scalar loss with its named components and optional gradient.

    ``grad`` is d total / d probabilities, same shape as the prediction.
    """

    total: float
    components: dict = field(default_factory=dict)
    grad: np.ndarray = None

    def __float__(self):
        return float(self.total)


def _check_probs(pred, min_classes=2):
    pred = np.asarray(pred)
    if pred.ndim < 2:
        raise DimensionError(f"prediction must be (N, C, ...), got shape {pred.shape}")
    if pred.shape[1] < min_classes:
        raise ConfigError(f"need at least {min_classes} classes, got {pred.shape[1]}")
    return pred


def _voxel_count(pred):
    return pred.size // pred.shape[1]


def shannon_entropy(pred, *, return_grad=False):
    """Mean per-voxel Shannon entropy ``-sum_c p_c log p_c``."""
    pred = _check_probs(pred)
    logp = np.log(np.maximum(pred, LOG_FLOOR))
    per_voxel = -(pred * logp).sum(axis=1, dtype=np.float64)
    total = float(per_voxel.sum(dtype=np.float64) / per_voxel.size)
    grad = None
    if return_grad:
        # d/dp of -p log p; below the clamp log p is constant
        dlog = np.where(pred > LOG_FLOOR, 1.0, 0.0).astype(pred.dtype)
        grad = (-(logp + dlog) / per_voxel.size).astype(pred.dtype)
    return LossValue(total, {"entropy": total}, grad)


def predicted_class_ratio(pred):
    """Mean class probability over every voxel of the batch (the estimate tau-hat)."""
    pred = _check_probs(pred)
    axes = (0,) + tuple(range(2, pred.ndim))
    return pred.sum(axis=axes, dtype=np.float64) / _voxel_count(pred)


def kl_divergence(tau_hat, tau, *, return_grad=False):
    """``sum_k tau_hat[k] log(tau_hat[k] / tau[k])`` with tau_hat clamped inside the log.

    Returns the scalar, or ``(value, d value / d tau_hat)``.
    """
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if tau_hat.shape != tau.shape or tau_hat.ndim != 1:
        raise DimensionError(f"ratio vectors must be 1-D of equal length, got {tau_hat.shape} and {tau.shape}")
    if np.any(tau < PRIOR_FLOOR):
        raise ConfigError(f"prior entries must be >= {PRIOR_FLOOR}")
    log_hat = np.log(np.maximum(tau_hat, LOG_FLOOR))
    value = float(np.sum(tau_hat * (log_hat - np.log(tau))))
    value = max(value, 0.0)  # rounding noise when tau_hat == tau
    if not return_grad:
        return value
    dlog = np.where(tau_hat > LOG_FLOOR, 1.0, 0.0)
    return value, log_hat - np.log(tau) + dlog


def entropy_kl_loss(pred, tau, lam=1.0, *, return_grad=False):
    """Entropy plus ``lam`` times the KL divergence of the predicted class ratio to ``tau``."""
    if lam < 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    pred = _check_probs(pred)
    ent = shannon_entropy(pred, return_grad=return_grad)
    if lam == 0:
        components = {"entropy": ent.total, "kl": 0.0}
        return LossValue(ent.total, components, ent.grad)
    tau = np.asarray(tau, dtype=np.float64)
    if tau.shape != (pred.shape[1],):
        raise DimensionError(f"prior has {tau.shape} entries for {pred.shape[1]} classes")
    tau_hat = predicted_class_ratio(pred)
    if return_grad:
        kl, dkl = kl_divergence(tau_hat, tau, return_grad=True)
    else:
        kl = kl_divergence(tau_hat, tau)
    total = ent.total + lam * kl
    grad = None
    if return_grad:
        # tau_hat[k] = mean over voxels of p_k, so each voxel gets dkl[k] / V
        bshape = (1, -1) + (1,) * (pred.ndim - 2)
        kl_grad = (lam * dkl / _voxel_count(pred)).reshape(bshape)
        grad = (ent.grad + kl_grad).astype(pred.dtype)
    return LossValue(total, {"entropy": ent.total, "kl": lam * kl}, grad)


def cross_entropy(pred, truth, *, weights=None, return_grad=False):
    """Mean ``-log p[truth]`` over voxels; ``truth`` is ``(N, ...)`` integer labels.

    With per-class ``weights`` each voxel counts ``weights[truth]`` times and
    the sum is divided by the total weight.
    """
    pred = _check_probs(pred)
    truth = np.asarray(truth)
    if truth.shape != (pred.shape[0],) + pred.shape[2:]:
        raise DimensionError(f"labels {truth.shape} do not match prediction {pred.shape}")
    if truth.min() < 0 or truth.max() >= pred.shape[1]:
        raise ConfigError("label value outside [0, C)")
    picked = np.take_along_axis(pred, truth[:, None].astype(np.intp), axis=1)[:, 0]
    logp = np.log(np.maximum(picked, LOG_FLOOR))
    if weights is None:
        w = np.ones(picked.shape)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (pred.shape[1],) or np.any(weights < 0):
            raise ConfigError("class weights must be non-negative, one per class")
        w = weights[truth]
    norm = w.sum(dtype=np.float64)
    total = float(-(w * logp).sum(dtype=np.float64) / norm)
    grad = None
    if return_grad:
        grad = np.zeros_like(pred)
        g = np.where(picked > LOG_FLOOR, -w / (np.maximum(picked, LOG_FLOOR) * norm), 0.0)
        np.put_along_axis(grad, truth[:, None].astype(np.intp), g[:, None].astype(pred.dtype), axis=1)
    return LossValue(total, {"cross_entropy": total}, grad)


def dice_score(pred_labels, truth, class_id):
    """``2|A & B| / (|A| + |B|)`` for one class; 1.0 when both masks are empty."""
    a = np.asarray(pred_labels)
    b = np.asarray(truth)
    if a.shape != b.shape:
        raise DimensionError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    A = a == class_id
    B = b == class_id
    denom = int(A.sum()) + int(B.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(A, B).sum()) / denom


def per_class_dice(pred_labels, truth, num_classes):
    """Dice for every foreground class ``1..num_classes-1``."""
    return np.array([dice_score(pred_labels, truth, k) for k in range(1, num_classes)])


def mean_dice(pred_labels, truth, num_classes):
    """Dice averaged over foreground classes; background is excluded."""
    return float(per_class_dice(pred_labels, truth, num_classes).mean())
