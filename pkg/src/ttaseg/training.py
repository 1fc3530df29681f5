"""Supervised training of the source network on phantoms."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .adaptation.adam import AdamState, adam_step
from .exceptions import ConfigError, NumericFailure
from .losses import cross_entropy
from .nn import backward, forward
from .nn.network import BN_EPS
from .shifts import SHIFT_KINDS, ShiftSpec
from .validation import check_label_maps, check_volumes

log = logging.getLogger(__name__)

DEFAULT_AUGMENTATION = {"rotation": 10.0, "scaling": 0.1, "smoothing": 0.5, "gamma": 0.15}


@dataclass
class TrainingSettings:
    """Source-training hyperparameters.

    Each step draws ``batch_size`` random training volumes, perturbs them
    with every shift kind at the magnitudes in ``augmentation`` and trains on
    random ``crop``-sized cubes. The learning rate drops by ``lr_decay`` after
    ``decay_at`` of the steps.

    The last ``volume_stat_steps`` steps draw one augmented volume each, set
    the BatchNorm statistics to those of that whole volume and train on
    ``batch_size`` crops of it with the statistics frozen. The network thus
    learns to work with single-volume statistics, the setting batch-statistic
    inference and test-time adaptation run in; crop statistics alone are too
    noisy for that.
    """

    steps: int = 1400
    learning_rate: float = 3e-3
    decay_at: float = 0.85
    lr_decay: float = 0.2
    batch_size: int = 2
    crop: int = 32
    class_weight_power: float = 0.5
    volume_stat_steps: int = 800
    augmentation: dict = field(default_factory=lambda: dict(DEFAULT_AUGMENTATION))
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not 0 <= self.volume_stat_steps <= self.steps:
            raise ConfigError("volume_stat_steps must lie in [0, steps]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        unknown = set(self.augmentation) - set(SHIFT_KINDS)
        if unknown:
            raise ConfigError(f"unknown augmentation kinds: {sorted(unknown)}")
        if any(v < 0 for v in self.augmentation.values()):
            raise ConfigError("augmentation magnitudes must be >= 0")


@dataclass
class TrainingReport:
    losses: list


def class_weights(labels, num_classes, power):
    """``frequency ** -power``, scaled so the voxel-weighted mean is 1.
    Absent classes get weight 0."""
    freq = np.bincount(np.asarray(labels).ravel(), minlength=num_classes) / np.asarray(labels).size
    w = np.where(freq > 0, np.maximum(freq, 1e-12) ** -power, 0.0)
    return w / np.sum(w * freq)


def _augment(volume, labels, augmentation, rng):
    for kind in SHIFT_KINDS:
        x = augmentation.get(kind, 0.0)
        if x > 0:
            out = ShiftSpec(kind, x).apply(volume, labels, seed=int(rng.integers(2 ** 31)))
            volume, labels = out.volume, out.labels
    return volume, labels


def _random_crop(volume, labels, size, rng):
    if size >= min(volume.shape):
        return volume, labels
    o = [int(rng.integers(0, s - size + 1)) for s in volume.shape]
    sl = tuple(slice(a, a + size) for a in o)
    return volume[sl], labels[sl]


def _set_volume_stats(net, volume):
    """Forward ``volume`` with batch statistics and copy them (biased
    variance, as batch-statistic inference uses) into the running buffers."""
    forward(net, volume[None, None], batch_stats=True)
    for layer in net.layers:
        if layer.kind == "BatchNorm":
            a = net.activation_cache[layer.inputs[0]]
            axes = (0,) + tuple(range(2, a.ndim))
            layer.buffers["running_mean"][...] = a.mean(axis=axes)
            layer.buffers["running_var"][...] = a.var(axis=axes)


def train_source(net, X, y, settings=None, *, callback=None):
    """Train every parameter of ``net`` in place with (weighted) cross-entropy.

    Raises :class:`NumericFailure` as soon as the loss or a parameter stops
    being finite. BatchNorm running statistics are left as accumulated during
    training; call :func:`recalibrate_batchnorm` afterwards.
    """
    settings = settings or TrainingSettings()
    X = check_volumes(X, dtype=net.dtype)[:, 0]
    y = check_label_maps(y, X[:, None], net.num_classes)
    if settings.crop % (2 ** net.num_pool_levels):
        raise ConfigError(f"crop {settings.crop} must be divisible by {2 ** net.num_pool_levels}")
    rng = np.random.default_rng(settings.seed)
    weights = class_weights(y, net.num_classes, settings.class_weight_power)
    params = net.parameters()
    names = list(params)
    state = AdamState()
    losses = []
    for step in range(settings.steps):
        lr = settings.learning_rate
        if step >= int(settings.decay_at * settings.steps):
            lr *= settings.lr_decay
        if step >= settings.steps - settings.volume_stat_steps:
            # one whole augmented volume supplies the statistics for all its crops
            i = int(rng.integers(len(X)))
            v, lab = _augment(X[i], y[i], settings.augmentation, rng)
            crops = [_random_crop(v, lab, settings.crop, rng) for _ in range(settings.batch_size)]
            _set_volume_stats(net, v)
            pred = forward(net, np.stack([c[0] for c in crops])[:, None], batch_stats=False)
        else:
            crops = []
            for _ in range(settings.batch_size):
                i = int(rng.integers(len(X)))
                v, lab = _augment(X[i], y[i], settings.augmentation, rng)
                crops.append(_random_crop(v, lab, settings.crop, rng))
            pred = forward(net, np.stack([c[0] for c in crops])[:, None], training_mode=True)
        loss = cross_entropy(pred, np.stack([c[1] for c in crops]), weights=weights, return_grad=True)
        grads = backward(net, loss.grad).params
        total = loss.total
        if not np.isfinite(total):
            raise NumericFailure(f"training loss became non-finite at step {step}")
        adam_step(params, grads, names, state, lr)
        if not all(np.all(np.isfinite(params[n])) for n in names):
            raise NumericFailure(f"a parameter became non-finite at step {step}")
        losses.append(total)
        if callback is not None:
            callback(step, total)
        if (step + 1) % 100 == 0:
            log.info("step %d loss %.4f", step + 1, float(np.mean(losses[-100:])))
    net.activation_cache = net._tape = None
    return TrainingReport(losses)


def recalibrate_batchnorm(net, X):
    """Replace BatchNorm running statistics by their average over whole
    volumes of ``X``, each forwarded on its own.

    Training on crops leaves statistics that differ from those of full
    volumes; this puts eval-mode inference on the same footing as
    single-volume batch statistics.
    """
    X = check_volumes(X, dtype=net.dtype)
    bn = [i for i, layer in enumerate(net.layers) if layer.kind == "BatchNorm"]
    means = {i: 0.0 for i in bn}
    variances = {i: 0.0 for i in bn}
    for x in X:
        forward(net, x[None], batch_stats=True)
        for i in bn:
            a = net.activation_cache[net.layers[i].inputs[0]].astype(np.float64)
            axes = (0,) + tuple(range(2, a.ndim))
            n = a.size // a.shape[1]
            means[i] = means[i] + a.mean(axis=axes)
            variances[i] = variances[i] + a.var(axis=axes) * n / max(n - 1, 1)
    for i in bn:
        buf = net.layers[i].buffers
        buf["running_mean"][...] = means[i] / len(X)
        # a dead channel has zero variance; keep it strictly positive
        buf["running_var"][...] = np.maximum(variances[i] / len(X), BN_EPS)
    net.activation_cache = net._tape = None
