from dataclasses import asdict, dataclass

from ..exceptions import ConfigError

STRATEGIES = ("tent", "entropy_kl", "layer_inspect")
BATCH_MODES = ("single_sample", "full_dataset")
BN_STATS_MODES = ("batch", "running")

DEFAULT_LR = {"tent": 1e-3, "entropy_kl": 1e-3, "layer_inspect": 1e-4}


@dataclass
class AdaptationConfig:
    """Hyperparameters of one test-time adaptation run.

    ``learning_rate=None`` resolves to the strategy default (1e-3 for TENT
    and EntropyKL, 1e-4 for LayerInspect). ``lam`` only affects EntropyKL and
    ``m`` only LayerInspect.
    """

    strategy: str = "tent"
    learning_rate: float = None
    num_passes: int = 1
    lam: float = 1.0
    m: int = 1
    batch_mode: str = "single_sample"
    batch_size: int = 2
    bn_stats_mode: str = "batch"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.strategy]
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if int(self.num_passes) != self.num_passes or self.num_passes < 1:
            raise ConfigError(f"num_passes must be a positive integer, got {self.num_passes}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if int(self.m) != self.m or self.m < 1:
            raise ConfigError(f"m must be a positive integer, got {self.m}")
        if self.batch_mode not in BATCH_MODES:
            raise ConfigError(f"unknown batch_mode {self.batch_mode!r}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size}")
        if self.bn_stats_mode not in BN_STATS_MODES:
            raise ConfigError(f"unknown bn_stats_mode {self.bn_stats_mode!r}")

    @property
    def use_batch_stats(self):
        return self.bn_stats_mode == "batch"

    def replace(self, **changes):
        d = asdict(self)
        if "strategy" in changes and "learning_rate" not in changes:
            d["learning_rate"] = None
        d.update(changes)
        return AdaptationConfig(**d)
