import numpy as np
import pytest

from ttaseg.nn import build_reference_net, forward


def central_difference(loss_of, array, index, eps=1e-3):
    """Central difference of ``loss_of()`` w.r.t. ``array[index]``, restoring the entry."""
    old = array[index]
    array[index] = old + eps
    up = loss_of()
    array[index] = old - eps
    down = loss_of()
    array[index] = old
    return (up - down) / (2 * eps)


def relative_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def _switch_pattern(net):
    """ReLU masks and max-pool winners of the last forward pass."""
    return [c if layer.kind == "ReLU" else c[0] for layer, c in zip(net.layers, net._tape)
            if layer.kind in ("ReLU", "MaxPool")]


def _same_pattern(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def smooth_fd(net, x, loss_of_pred, batch_stats, arr, idx, eps=1e-3):
    """Central difference, or None when the +-eps probes flip a ReLU or
    max-pool switch (the loss is only piecewise smooth there)."""
    forward(net, x, batch_stats=batch_stats)
    base = _switch_pattern(net)
    old = arr[idx]
    vals = []
    for step in (eps, -eps):
        arr[idx] = old + step
        vals.append(loss_of_pred(forward(net, x, batch_stats=batch_stats)))
        same = _same_pattern(base, _switch_pattern(net))
        if not same:
            break
    arr[idx] = old
    if not same:
        return None
    return (vals[0] - vals[1]) / (2 * eps)


@pytest.fixture
def net64():
    """Seeded float64 reference net with perturbed BN parameters, so the
    BN scale/shift gradients are not at a symmetric point."""
    net = build_reference_net(5, seed=3).astype(np.float64)
    rng = np.random.default_rng(4)
    for layer in net.layers:
        if layer.kind == "BatchNorm":
            layer.params["scale"][...] = rng.uniform(0.5, 1.5, layer.params["scale"].shape)
            layer.params["shift"][...] = rng.normal(0, 0.2, layer.params["shift"].shape)
            layer.buffers["running_mean"][...] = rng.normal(0, 0.1, layer.buffers["running_mean"].shape)
            layer.buffers["running_var"][...] = rng.uniform(0.5, 2.0, layer.buffers["running_var"].shape)
        if layer.kind == "Conv3d":
            layer.params["bias"][...] = rng.normal(0, 0.1, layer.params["bias"].shape)
    return net
