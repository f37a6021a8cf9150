"""Frequency-basis forecasting models on a small numpy autodiff core."""

__version__ = "0.1.0"

from .errors import CheckpointError, ConfigError, DataError, FbmError, NumericError

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "FbmError",
    "NumericError",
    "__version__",
]
