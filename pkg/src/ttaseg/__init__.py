"""Test-time adaptation for 3-D segmentation networks on synthetic phantoms."""

from .adaptation import AdaptationConfig, run_adaptation
from .estimators import SourceSegmenter, TestTimeAdapter
from .exceptions import (
    ConfigError,
    DimensionError,
    FileFormatError,
    MissingImportanceError,
    NonFiniteError,
    NumericFailure,
    StateError,
    TTASegError,
)
from .nn import Network, build_reference_net, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig", "run_adaptation", "ConfigError", "DimensionError", "FileFormatError",
    "MissingImportanceError", "NonFiniteError", "NumericFailure", "StateError", "TTASegError",
    "Network", "build_reference_net", "load_checkpoint", "save_checkpoint", "SourceSegmenter",
    "TestTimeAdapter",
]
