"""Experiment configuration: a YAML file of nested tables.

Every key is optional; missing keys take the defaults in ``DEFAULTS``.
``load_config`` merges a file over the defaults and validates the result.
"""

import copy

import yaml

from ..adaptation import AdaptationConfig
from ..exceptions import ConfigError
from ..phantom import PhantomSpec
from ..shifts import SHIFT_KINDS
from ..training import TrainingSettings

METHODS = ("none", "histogram_match", "tent", "entropy_kl", "layer_inspect")
SWEEP_AXES = ("lambda", "m", "lr")

DEFAULTS = {
    "seed": 0,
    "phantoms": {
        "size": 64,
        "noise": 0.3,
        "bias": 0.1,
        # source training cohort, drawn from mid-range growth
        "train": {"count": 40, "seed": 1000, "growth": [0.3, 0.7]},
        # evaluation cohort at central growth
        "test": {"count": 20, "seed": 0, "growth": 0.5},
        # atlas cohort spanning all growth values
        "atlas": {"count": 20, "seed": 5000, "growth": [0.0, 1.0], "bins": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]},
    },
    "training": {
        "steps": 1400,
        "learning_rate": 3e-3,
        "decay_at": 0.85,
        "lr_decay": 0.2,
        "batch_size": 2,
        "crop": 32,
        "class_weight_power": 0.5,
        # final steps trained with whole-volume BatchNorm statistics
        "volume_stat_steps": 800,
        "augmentation": {"rotation": 10.0, "scaling": 0.1, "smoothing": 0.5, "gamma": 0.15},
        "recalibration_count": 20,
    },
    "grids": {
        "rotation": [0, 5, 10, 20, 30, 45],
        "scaling": [0, 0.1, 0.2, 0.3, 0.4],
        "smoothing": [0, 0.5, 1, 1.5, 2],
        "gamma": [0, 0.3, 0.6, 0.9, 1.2],
    },
    "adaptation": {
        "methods": list(METHODS),
        "modes": ["single_sample", "full_dataset"],
        "batch_size": 2,
        "bn_stats_mode": "batch",
        "tent": {"learning_rate": 1e-3, "num_passes": 1},
        "entropy_kl": {"learning_rate": 1e-3, "num_passes": 1, "lam": 1.0},
        "layer_inspect": {"learning_rate": 1e-4, "num_passes": 1, "m": 1},
        "histogram_bins": 256,
    },
    "sweeps": {
        "lambda": [0, 0.1, 0.5, 1, 2, 5, 10],
        "m": None,  # None: 1 .. number of parametric layers
        "lr": [1e-5, 1e-4, 1e-3, 1e-2],
        "rotations": [10, 30],
        "count": 10,
    },
    "growth_curve": {
        "bins": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        "count": 6,
        "seed": 20000,
        "methods": ["none", "tent", "entropy_kl", "layer_inspect"],
    },
    "acceptance": {
        "rotation": {"magnitudes": [0, 10, 20, 30, 45], "methods": ["none", "tent"]},
        "gamma": {"magnitudes": [0, 1.2], "methods": ["none", "histogram_match"]},
        "compare_magnitude": 30,
    },
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _max(grid):
    return max(float(x) for x in grid)


def validate(cfg):
    for kind in SHIFT_KINDS:
        grid = cfg["grids"].get(kind)
        if not grid:
            raise ConfigError(f"grid for {kind} is empty")
        if any(float(x) < 0 for x in grid):
            raise ConfigError(f"grid for {kind} has negative magnitudes")
    for kind, x in cfg["training"]["augmentation"].items():
        if kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown augmentation kind {kind!r}")
        if float(x) >= _max(cfg["grids"][kind]):
            raise ConfigError(
                f"training augmentation for {kind} ({x}) must be strictly below the largest "
                f"evaluation magnitude ({_max(cfg['grids'][kind])})")
    for key in ("lambda", "lr"):
        if not cfg["sweeps"][key]:
            raise ConfigError(f"sweep grid {key!r} is empty")
    if cfg["sweeps"]["m"] is not None and not cfg["sweeps"]["m"]:
        raise ConfigError("sweep grid 'm' is empty")
    ad = cfg["adaptation"]
    for m in ad["methods"]:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    for mode in ad["modes"]:
        if mode not in ("single_sample", "full_dataset"):
            raise ConfigError(f"unknown batch mode {mode!r}")
    if len(cfg["growth_curve"]["bins"]) < 4:
        raise ConfigError("growth curve needs at least 3 bins")
    for kind in ("rotation", "gamma"):
        acc = cfg["acceptance"][kind]
        if not acc["magnitudes"] or not acc["methods"]:
            raise ConfigError(f"acceptance grid for {kind!r} is empty")
        if any(m not in METHODS for m in acc["methods"]):
            raise ConfigError(f"unknown method in acceptance.{kind}.methods")
    ph = cfg["phantoms"]
    PhantomSpec(size=int(ph["size"]), noise=float(ph["noise"]), bias=float(ph["bias"]))
    for key in ("train", "test", "atlas"):
        if int(cfg["phantoms"][key]["count"]) < 1:
            raise ConfigError(f"phantoms.{key}.count must be >= 1")
    # constructing these runs their own checks
    training_settings(cfg)
    for strategy in ("tent", "entropy_kl", "layer_inspect"):
        adaptation_config(cfg, strategy, "single_sample")
    return cfg


def load_config(path=None, *, seed=None):
    """Defaults, overlaid with the YAML file at ``path`` and then ``seed``."""
    override = {}
    if path is not None:
        try:
            with open(path) as fh:
                override = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(override, dict):
            raise ConfigError("config file must hold a table at the top level")
    cfg = _merge(DEFAULTS, override)
    if seed is not None:
        cfg["seed"] = int(seed)
    try:
        return validate(cfg)
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config: {exc}") from exc


def training_settings(cfg):
    t = dict(cfg["training"])
    t.pop("recalibration_count")
    return TrainingSettings(seed=int(cfg["seed"]), **t)


def adaptation_config(cfg, strategy, mode, **overrides):
    ad = cfg["adaptation"]
    params = dict(ad[strategy])
    params.update(overrides)
    return AdaptationConfig(strategy=strategy, batch_mode=mode, batch_size=int(ad["batch_size"]),
                            bn_stats_mode=ad["bn_stats_mode"], **params)
