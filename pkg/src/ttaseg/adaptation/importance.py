"""First-order Taylor importance of layer activations and layer selection."""

from dataclasses import dataclass

import numpy as np

from ..losses import shannon_entropy
from ..nn import backward, forward


@dataclass
class ImportanceVector:
    """Per-layer importance, L2-normalised across layers."""

    values: np.ndarray
    provenance: str = "target"

    def __len__(self):
        return len(self.values)


def _entropy_loss(pred):
    return shannon_entropy(pred, return_grad=True)


def l2_normalize(v):
    v = np.asarray(v, dtype=np.float64)
    scale = np.max(np.abs(v)) if v.size else 0.0
    if not scale > 0:
        return np.zeros_like(v)
    v = v / scale  # avoids underflow of v * v for tiny entries
    return v / np.sqrt(np.sum(v * v))


def filter_importance(net, data, loss_fn=None, *, batch_stats=False, batch_size=2):
    """Per-layer, per-filter ``|1/N sum_n sum_voxels dL/dz * z|``.

    ``data`` is ``(N, 1, D, H, W)``. Each chunk of ``batch_size`` samples is
    forwarded together and its mean loss is scaled by the chunk length, so
    every sample contributes the gradient of its own voxel-mean loss.
    Returns a list with one 1-D array per layer.
    """
    data = np.asarray(data)
    if data.ndim != 5 or data.shape[0] == 0:
        raise ValueError("importance needs a non-empty (N, 1, D, H, W) batch")
    loss_fn = loss_fn or _entropy_loss
    sums = None
    N = data.shape[0]
    for start in range(0, N, batch_size):
        chunk = data[start:start + batch_size]
        pred = forward(net, chunk, batch_stats=batch_stats)
        loss = loss_fn(pred)
        grads = backward(net, loss.grad * len(chunk))
        acts = net.activation_cache
        if sums is None:
            sums = [np.zeros(a.shape[1]) for a in acts]
        for l, (z, g) in enumerate(zip(acts, grads.activations)):
            n, c = z.shape[:2]
            zz = z.reshape(n, c, -1).astype(np.float64)
            gg = g.reshape(n, c, -1).astype(np.float64)
            sums[l] += np.einsum("ncv,ncv->c", gg, zz)
    return [np.abs(s / N) for s in sums]


def taylor_importance(net, data, loss_fn=None, *, batch_stats=False, batch_size=2, provenance="target"):
    """Layer importance: per-filter Taylor scores summed within each layer,
    then L2-normalised across layers."""
    per_filter = filter_importance(net, data, loss_fn, batch_stats=batch_stats, batch_size=batch_size)
    per_layer = np.array([f.sum() for f in per_filter])
    return ImportanceVector(l2_normalize(per_layer), provenance)


def select_layers(theta_s, theta_t, m):
    """Indices of the ``m`` entries with the largest ``|theta_s - theta_t|``,
    largest first; ties go to the lower index."""
    a = np.asarray(getattr(theta_s, "values", theta_s), dtype=np.float64)
    b = np.asarray(getattr(theta_t, "values", theta_t), dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"importance vectors differ in shape: {a.shape} vs {b.shape}")
    if not 1 <= m <= len(a):
        raise ValueError(f"m={m} must lie in 1..{len(a)}")
    diff = np.abs(a - b)
    order = np.lexsort((np.arange(len(a)), -diff))
    return [int(i) for i in order[:m]]
