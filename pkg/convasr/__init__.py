"""convasr: a transformer speech recognizer with convolutional context, on numpy."""

from .errors import CheckpointError, ConfigError, ContractError, ConvAsrError, DimensionError, InputError, NumericAbort

__version__ = "1.0.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "ConvAsrError",
    "DimensionError",
    "InputError",
    "NumericAbort",
    "__version__",
]
