"""Exception hierarchy shared across the package."""


class TTASegError(Exception):
    """Base class for all errors raised by ttaseg."""


class DimensionError(TTASegError, ValueError):
    """An array has the wrong rank, extents or channel count."""


class NonFiniteError(TTASegError, ValueError):
    """An input contains NaN or Inf."""


class StateError(TTASegError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class ConfigError(TTASegError, ValueError):
    """Invalid hyperparameter or configuration value."""


class NumericFailure(TTASegError, ArithmeticError):
    """Optimisation diverged (loss became NaN/Inf)."""


class FileFormatError(TTASegError, ValueError):
    """Bad magic bytes or malformed header in a binary file."""


class VersionError(FileFormatError):
    """File was written with an unsupported format version."""


class TruncatedFileError(FileFormatError):
    """Payload is shorter than the header promises."""


class UnknownLayerError(FileFormatError):
    """Checkpoint references a layer kind this build does not know."""


class MissingImportanceError(StateError):
    """LayerInspect needs a cached source importance vector."""
