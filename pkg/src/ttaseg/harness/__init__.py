from .config import DEFAULTS, METHODS, load_config
from .results import COLUMNS, ResultRow, paired_t_test, read_rows, write_rows

__all__ = ["DEFAULTS", "METHODS", "load_config", "COLUMNS", "ResultRow", "paired_t_test", "read_rows", "write_rows"]
