"""Encoder-decoder segmentation network with explicit forward/backward passes."""

import copy
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import DimensionError, NonFiniteError, StateError
from . import functional as F

LAYER_KINDS = ("Conv3d", "BatchNorm", "ReLU", "MaxPool", "NearestUpsample", "Softmax", "Concat")
PARAMETRIC_KINDS = ("Conv3d", "BatchNorm")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class Layer:
    """One node of the network graph.

    ``inputs`` lists the indices of the layers whose outputs feed this one;
    ``-1`` denotes the network input. Only ``Concat`` has two inputs.
    """

    kind: str
    name: str
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    inputs: tuple = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self):
        return bool(self.params)

    def param_names(self):
        return [f"{self.name}.{p}" for p in self.params]


@dataclass
class Gradients:
    """Result of :func:`backward`.

    ``params`` maps qualified parameter names (``"enc1.bn.scale"``) to arrays;
    ``activations[l]`` is the gradient of the loss w.r.t. the output of layer l.
    """

    params: dict
    activations: list


class Network:
    """Ordered layer graph with a cache of the latest forward activations."""

    def __init__(self, layers, *, dtype=np.float32):
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        self.activation_cache = None
        self._tape = None
        self.source_importance = None
        self._check_topology()

    def _check_topology(self):
        kinds = [layer.kind for layer in self.layers]
        if kinds.count("Softmax") != 1 or kinds[-1] != "Softmax":
            raise ValueError("Softmax must appear exactly once, as the final layer")
        for i, layer in enumerate(self.layers):
            if any(j >= i for j in layer.inputs):
                raise ValueError(f"layer {layer.name} consumes a later layer")
            if layer.kind == "Conv3d" and layer.params["weight"].shape[2] % 2 == 0:
                raise ValueError(f"{layer.name}: even kernel extent")
            if layer.kind == "BatchNorm" and np.any(layer.buffers["running_var"] <= 0):
                raise ValueError(f"{layer.name}: running variance must be positive")

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        return f"Network(layers={len(self.layers)}, num_classes={self.num_classes}, dtype={self.dtype})"

    @property
    def num_classes(self):
        convs = [l for l in self.layers if l.kind == "Conv3d"]
        return convs[-1].params["weight"].shape[0]

    @property
    def num_pool_levels(self):
        return sum(l.kind == "MaxPool" for l in self.layers)

    def named_parameters(self):
        """Yield ``(qualified_name, array)`` in layer order. Arrays are live."""
        for layer in self.layers:
            for pname, arr in layer.params.items():
                yield f"{layer.name}.{pname}", arr

    def parameters(self):
        return dict(self.named_parameters())

    def layer_index(self, name):
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    def owner_index(self, param_name):
        """Index of the layer that owns ``param_name``."""
        return self.layer_index(param_name.rsplit(".", 1)[0])

    def bn_parameter_names(self):
        return [n for layer in self.layers if layer.kind == "BatchNorm" for n in layer.param_names()]

    def parametric_layer_indices(self):
        return [i for i, l in enumerate(self.layers) if l.kind in PARAMETRIC_KINDS]

    def copy(self):
        new = Network(copy.deepcopy(self.layers), dtype=self.dtype)
        if self.source_importance is not None:
            new.source_importance = self.source_importance.copy()
        return new

    def astype(self, dtype):
        """Copy of the network with every tensor cast to ``dtype``."""
        new = self.copy()
        new.dtype = np.dtype(dtype)
        for layer in new.layers:
            for d in (layer.params, layer.buffers):
                for k in d:
                    d[k] = d[k].astype(dtype)
        return new

    def load_parameters(self, other):
        """Overwrite parameters and buffers in place with ``other``'s values."""
        for mine, theirs in zip(self.layers, other.layers):
            for d_m, d_t in ((mine.params, theirs.params), (mine.buffers, theirs.buffers)):
                for k in d_m:
                    d_m[k][...] = d_t[k]


def build_reference_net(num_classes=5, *, seed=0, dtype=np.float32, width=8):
    """Two-level encoder-decoder:

    conv(1->w)/BN/ReLU, pool, conv(w->2w)/BN/ReLU, upsample, concat skip,
    conv(3w->w)/BN/ReLU, conv1x1(w->C), softmax.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)

    def conv(name, cin, cout, k, src):
        fan_in = cin * k ** 3
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k, k)).astype(dtype)
        return Layer("Conv3d", name, {"weight": w, "bias": np.zeros(cout, dtype)}, inputs=(src,))

    def bn(name, ch, src):
        return Layer("BatchNorm", name,
                     {"scale": np.ones(ch, dtype), "shift": np.zeros(ch, dtype)},
                     {"running_mean": np.zeros(ch, dtype), "running_var": np.ones(ch, dtype)},
                     inputs=(src,))

    w = width
    layers = [
        conv("enc1.conv", 1, w, 3, -1),            # 0
        bn("enc1.bn", w, 0),                       # 1
        Layer("ReLU", "enc1.relu", inputs=(1,)),   # 2
        Layer("MaxPool", "down.pool", inputs=(2,)),  # 3
        conv("enc2.conv", w, 2 * w, 3, 3),         # 4
        bn("enc2.bn", 2 * w, 4),                   # 5
        Layer("ReLU", "enc2.relu", inputs=(5,)),   # 6
        Layer("NearestUpsample", "up.upsample", inputs=(6,)),  # 7
        Layer("Concat", "skip.concat", inputs=(7, 2)),         # 8
        conv("dec.conv", 3 * w, w, 3, 8),          # 9
        bn("dec.bn", w, 9),                        # 10
        Layer("ReLU", "dec.relu", inputs=(10,)),   # 11
        conv("head.conv", w, num_classes, 1, 11),  # 12
        Layer("Softmax", "head.softmax", inputs=(12,)),  # 13
    ]
    return Network(layers, dtype=dtype)


def _validate_input(net, x):
    x = np.asarray(x)
    if x.ndim != 5:
        raise DimensionError(f"expected (N, 1, D, H, W) input, got rank {x.ndim} with shape {x.shape}")
    if x.shape[1] != 1:
        raise DimensionError(f"expected 1 input channel, got {x.shape[1]} (shape {x.shape})")
    if x.shape[0] < 1:
        raise DimensionError("empty batch")
    div = 2 ** net.num_pool_levels
    bad = [s for s in x.shape[2:] if s % div]
    if bad:
        raise DimensionError(f"spatial extents {x.shape[2:]} must be divisible by {div}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("input contains NaN or Inf")
    return x.astype(net.dtype, copy=False)


def forward(net, x, training_mode=False, *, batch_stats=None):
    """Run the network and return per-voxel class probabilities ``(N, C, D, H, W)``.

    ``training_mode`` makes BatchNorm use batch statistics and update its
    running statistics. ``batch_stats=True`` without ``training_mode`` uses
    batch statistics but leaves the running buffers untouched, which is what
    test-time adaptation wants.
    """
    x = _validate_input(net, x)
    use_batch = training_mode if batch_stats is None else bool(batch_stats)
    outs = []
    tape = []
    for layer in net.layers:
        src = [x if j < 0 else outs[j] for j in layer.inputs]
        kind = layer.kind
        if kind == "Conv3d":
            y, cache = F.conv3d_forward(src[0], layer.params["weight"], layer.params["bias"])
        elif kind == "BatchNorm":
            y, cache = F.batchnorm_forward(
                src[0], layer.params["scale"], layer.params["shift"],
                layer.buffers["running_mean"], layer.buffers["running_var"],
                use_batch_stats=use_batch, update_running=training_mode,
                momentum=BN_MOMENTUM, eps=BN_EPS)
        elif kind == "ReLU":
            y, cache = F.relu_forward(src[0])
        elif kind == "MaxPool":
            y, cache = F.maxpool_forward(src[0])
        elif kind == "NearestUpsample":
            y, cache = F.upsample_forward(src[0]), None
        elif kind == "Concat":
            y, cache = np.concatenate(src, axis=1), [s.shape[1] for s in src]
        else:  # Softmax
            y = F.softmax_forward(src[0])
            cache = None
        outs.append(y)
        tape.append(cache)
    net.activation_cache = outs
    net._tape = tape
    return outs[-1]


def backward(net, loss_grad):
    """Backpropagate ``loss_grad`` (d loss / d probabilities) through the last forward."""
    if net.activation_cache is None or net._tape is None:
        raise StateError("backward() called before forward()")
    outs = net.activation_cache
    loss_grad = np.asarray(loss_grad, dtype=net.dtype)
    if loss_grad.shape != outs[-1].shape:
        raise DimensionError(f"loss gradient shape {loss_grad.shape} != output shape {outs[-1].shape}")
    L = len(net.layers)
    act_grads = [None] * L
    act_grads[-1] = loss_grad
    pgrads = {}

    def accumulate(j, g):
        if j < 0:
            return
        act_grads[j] = g if act_grads[j] is None else act_grads[j] + g

    for i in range(L - 1, -1, -1):
        layer = net.layers[i]
        g = act_grads[i]
        if g is None:
            g = np.zeros_like(outs[i])
            act_grads[i] = g
        cache = net._tape[i]
        kind = layer.kind
        if kind == "Softmax":
            accumulate(layer.inputs[0], F.softmax_backward(g, outs[i]))
        elif kind == "Conv3d":
            dx, dw, db = F.conv3d_backward(g, layer.params["weight"], cache,
                                             need_input_grad=layer.inputs[0] >= 0)
            pgrads[f"{layer.name}.weight"] = dw
            pgrads[f"{layer.name}.bias"] = db
            if layer.inputs[0] >= 0:
                accumulate(layer.inputs[0], dx)
        elif kind == "BatchNorm":
            dx, dscale, dshift = F.batchnorm_backward(g, layer.params["scale"], cache)
            pgrads[f"{layer.name}.scale"] = dscale
            pgrads[f"{layer.name}.shift"] = dshift
            accumulate(layer.inputs[0], dx)
        elif kind == "ReLU":
            accumulate(layer.inputs[0], F.relu_backward(g, cache))
        elif kind == "MaxPool":
            accumulate(layer.inputs[0], F.maxpool_backward(g, cache))
        elif kind == "NearestUpsample":
            accumulate(layer.inputs[0], F.upsample_backward(g))
        elif kind == "Concat":
            start = 0
            for j, width in zip(layer.inputs, cache):
                accumulate(j, g[:, start:start + width])
                start += width
    ordered = {name: pgrads[name] for name, _ in net.named_parameters()}
    return Gradients(ordered, act_grads)
