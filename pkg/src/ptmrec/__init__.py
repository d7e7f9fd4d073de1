"""Two-stage parameter-efficient multimodal recommendation."""

__version__ = "0.1.0"

from .errors import CheckpointError, ConfigError, DataError, NumericalAbort

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "NumericalAbort",
    "__version__",
]
