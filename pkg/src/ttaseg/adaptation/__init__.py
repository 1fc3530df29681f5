from .adam import AdamState, adam_step
from .config import AdaptationConfig, BATCH_MODES, BN_STATS_MODES, STRATEGIES
from .importance import ImportanceVector, filter_importance, l2_normalize, select_layers, taylor_importance
from .runner import RunResult, run_adaptation
from .strategies import (
    AdaptedModel,
    adapt,
    adapt_entropy_kl,
    adapt_layer_inspect,
    adapt_tent,
    cache_source_importance,
    choose_layers,
    parameter_mask,
    predict_proba,
)

__all__ = [
    "AdamState", "adam_step", "AdaptationConfig", "BATCH_MODES", "BN_STATS_MODES", "STRATEGIES",
    "ImportanceVector", "filter_importance", "l2_normalize", "select_layers", "taylor_importance",
    "RunResult", "run_adaptation", "AdaptedModel", "adapt", "adapt_entropy_kl", "adapt_layer_inspect",
    "adapt_tent", "cache_source_importance", "choose_layers", "parameter_mask", "predict_proba",
]
