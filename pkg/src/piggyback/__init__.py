"""Per-task binary weight masks over a frozen backbone network."""

from piggyback.errors import (
    BindingError,
    ConfigError,
    DataError,
    DegenerateBatchError,
    DegenerateWeightsError,
    DimensionError,
    EncodingError,
    FormatError,
    PiggybackError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "BindingError",
    "ConfigError",
    "DataError",
    "DegenerateBatchError",
    "DegenerateWeightsError",
    "DimensionError",
    "EncodingError",
    "FormatError",
    "PiggybackError",
    "TrainingError",
]
