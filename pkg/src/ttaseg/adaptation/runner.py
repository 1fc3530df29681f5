"""Adapt-then-predict over a set of target volumes."""

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import DimensionError
from ..losses import mean_dice, shannon_entropy
from ..validation import check_label_maps, check_volumes
from .strategies import adapt


@dataclass
class RunResult:
    """Per-sample outputs of :func:`run_adaptation`.

    In full-dataset mode there is one adapted model, so ``logs`` and
    ``selected_layers`` have a single entry.
    """

    predictions: np.ndarray
    entropy: np.ndarray
    logs: list = field(default_factory=list)
    selected_layers: list = field(default_factory=list)
    dice: np.ndarray = None


def _priors(prior, n):
    if prior is None:
        return [None] * n
    prior = np.asarray(prior, dtype=np.float64)
    if prior.ndim == 1:
        return [prior] * n
    if prior.shape[0] != n:
        raise DimensionError(f"got {prior.shape[0]} priors for {n} samples")
    return list(prior)


def run_adaptation(net, X, config, *, prior=None, labels=None):
    """Adapt ``net`` to ``X`` and label every volume.

    ``single_sample`` adapts a fresh copy of the source network to each
    volume on its own; ``full_dataset`` adapts one copy on all volumes in
    chunks of ``config.batch_size``. ``prior`` is one class-ratio vector or
    one per sample (single-sample mode only).
    """
    X = check_volumes(X, dtype=net.dtype)
    n = X.shape[0]
    preds = []
    ents = []
    logs = []
    selected = []
    if config.batch_mode == "single_sample":
        for x, tau in zip(X, _priors(prior, n)):
            model = adapt(net, x[None], config, tau)
            p = model.predict_proba(x[None], batch_stats=config.use_batch_stats)
            preds.append(p.argmax(axis=1).astype(np.uint8)[0])
            ents.append(shannon_entropy(p).total)
            logs.append(model.log)
            selected.append(model.selected_layers)
    else:
        if prior is not None and np.ndim(prior) != 1:
            raise DimensionError("full-dataset adaptation takes a single prior vector")
        model = adapt(net, X, config, prior)
        logs.append(model.log)
        selected.append(model.selected_layers)
        for i in range(0, n, config.batch_size):
            p = model.predict_proba(X[i:i + config.batch_size], batch_stats=config.use_batch_stats)
            preds.extend(p.argmax(axis=1).astype(np.uint8))
            ents.extend(shannon_entropy(q[None]).total for q in p)
    result = RunResult(np.stack(preds), np.array(ents), logs, selected)
    if labels is not None:
        y = check_label_maps(labels, X, net.num_classes)
        result.dice = np.array([mean_dice(a, b, net.num_classes) for a, b in zip(result.predictions, y)])
    return result
