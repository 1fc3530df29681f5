"""TENT, EntropyKL and LayerInspect test-time adaptation.

Every strategy works on a copy of the source network, so the caller's
network is never modified. Optimiser state starts fresh on every call.
"""

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ConfigError, MissingImportanceError, NumericFailure
from ..losses import entropy_kl_loss, shannon_entropy
from ..nn import backward, forward
from ..validation import check_prior, check_volumes
from .adam import AdamState, adam_step
from .config import AdaptationConfig
from .importance import ImportanceVector, select_layers, taylor_importance


@dataclass
class AdaptedModel:
    """Result of one adaptation: the adapted copy and what happened to it."""

    network: object
    source: object
    mask: list
    log: list = field(default_factory=list)
    selected_layers: list = None
    target_importance: ImportanceVector = None

    @property
    def backward_passes(self):
        return len(self.log)

    def predict_proba(self, X, *, batch_stats=True, batch_size=None):
        return predict_proba(self.network, X, batch_stats=batch_stats, batch_size=batch_size)


def batches(X, batch_size):
    return [X[i:i + batch_size] for i in range(0, X.shape[0], batch_size)]


def predict_proba(net, X, *, batch_stats=False, batch_size=None):
    """Class probabilities for ``X``, forwarded in chunks of ``batch_size``
    (all at once when ``None``)."""
    X = check_volumes(X, dtype=net.dtype)
    size = batch_size or X.shape[0]
    out = [forward(net, b, batch_stats=batch_stats) for b in batches(X, size)]
    net.activation_cache = net._tape = None
    return np.concatenate(out)


def parameter_mask(net, strategy, selected_layers=None):
    """Names of the parameters a strategy may update."""
    if strategy in ("tent", "entropy_kl"):
        return net.bn_parameter_names()
    if strategy == "layer_inspect":
        if selected_layers is None:
            raise ValueError("layer_inspect needs the selected layer indices")
        return [p for i in sorted(selected_layers) for p in net.layers[i].param_names()]
    raise ConfigError(f"unknown strategy {strategy!r}")


def _optimise(net, X, loss_fn, mask, config):
    adapted = net.copy()
    params = adapted.parameters()
    state = AdamState()
    log = []
    chunks = batches(X, config.batch_size) if config.batch_mode == "full_dataset" else [X]
    for p in range(config.num_passes):
        for b, chunk in enumerate(chunks):
            pred = forward(adapted, chunk, batch_stats=config.use_batch_stats)
            loss = loss_fn(pred)
            if not np.isfinite(loss.total):
                raise NumericFailure(f"adaptation loss became non-finite at pass {p}, batch {b}")
            grads = backward(adapted, loss.grad)
            adam_step(params, grads.params, mask, state, config.learning_rate)
            per_sample = [shannon_entropy(q[None]).total for q in pred]
            log.append({"pass": p, "batch": b, "loss": loss.total, **loss.components,
                        "sample_entropy": per_sample})
    for name in mask:
        if not np.all(np.isfinite(params[name])):
            raise NumericFailure(f"parameter {name} became non-finite during adaptation")
    adapted.activation_cache = adapted._tape = None
    return adapted, log


def _config(config, strategy, overrides):
    config = AdaptationConfig(strategy=strategy) if config is None else config
    if config.strategy != strategy:
        config = config.replace(strategy=strategy)
    return config.replace(**overrides) if overrides else config


def adapt_tent(net, X, config=None, **overrides):
    """Minimise mean prediction entropy over the BatchNorm scale/shift parameters."""
    config = _config(config, "tent", overrides)
    X = check_volumes(X, dtype=net.dtype)
    mask = parameter_mask(net, "tent")
    adapted, log = _optimise(net, X, lambda p: shannon_entropy(p, return_grad=True), mask, config)
    return AdaptedModel(adapted, net, mask, log)


def adapt_entropy_kl(net, X, prior, config=None, **overrides):
    """TENT plus ``lam`` times KL(predicted class ratio || ``prior``)."""
    config = _config(config, "entropy_kl", overrides)
    X = check_volumes(X, dtype=net.dtype)
    tau = check_prior(prior, net.num_classes)
    mask = parameter_mask(net, "entropy_kl")
    lam = config.lam
    adapted, log = _optimise(net, X, lambda p: entropy_kl_loss(p, tau, lam, return_grad=True), mask, config)
    return AdaptedModel(adapted, net, mask, log)


def cache_source_importance(net, X, *, batch_stats=True, batch_size=1):
    """Compute the source importance vector on in-distribution data and
    store it on ``net`` (it is written into saved checkpoints)."""
    X = check_volumes(X, dtype=net.dtype)
    theta = taylor_importance(net, X, batch_stats=batch_stats, batch_size=batch_size, provenance="source")
    net.activation_cache = net._tape = None
    net.source_importance = theta.values.copy()
    return theta


def choose_layers(net, theta_t, m):
    """The ``m`` parametric layers whose importance moved most from the source."""
    if net.source_importance is None:
        raise MissingImportanceError("network has no cached source importance; run cache_source_importance first")
    theta_s = np.asarray(net.source_importance, dtype=np.float64)
    theta_t = np.asarray(getattr(theta_t, "values", theta_t), dtype=np.float64)
    if theta_s.shape != (len(net),) or theta_t.shape != (len(net),):
        raise ValueError("importance vectors need one entry per layer")
    candidates = net.parametric_layer_indices()
    if not 1 <= m <= len(candidates):
        raise ConfigError(f"m={m} must lie in 1..{len(candidates)} (parametric layers)")
    local = select_layers(theta_s[candidates], theta_t[candidates], m)
    return [candidates[i] for i in local]


def adapt_layer_inspect(net, X, config=None, **overrides):
    """Entropy minimisation restricted to the ``m`` layers whose Taylor
    importance shifted most between source and target data."""
    config = _config(config, "layer_inspect", overrides)
    if net.source_importance is None:
        raise MissingImportanceError("network has no cached source importance; run cache_source_importance first")
    X = check_volumes(X, dtype=net.dtype)
    size = config.batch_size if config.batch_mode == "full_dataset" else X.shape[0]
    probe = net.copy()
    theta_t = taylor_importance(probe, X, batch_stats=config.use_batch_stats, batch_size=size)
    selected = choose_layers(net, theta_t, config.m)
    mask = parameter_mask(net, "layer_inspect", selected)
    adapted, log = _optimise(net, X, lambda p: shannon_entropy(p, return_grad=True), mask, config)
    return AdaptedModel(adapted, net, mask, log, selected, theta_t)


def adapt(net, X, config, prior=None):
    if config.strategy == "tent":
        return adapt_tent(net, X, config)
    if config.strategy == "entropy_kl":
        if prior is None:
            raise ConfigError("entropy_kl needs a class-ratio prior")
        return adapt_entropy_kl(net, X, prior, config)
    return adapt_layer_inspect(net, X, config)
