"""Active speaker detection with face-voice association, at desk scale.

A numpy-only reimplementation: a small reverse-mode autodiff core, the
attention/LSTM/GBU layers, context assembly, training, metrics, contribution
analysis and a synthetic data generator.
"""

from favoa.errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FavoaError,
    FormatError,
    NumericError,
    UndefinedMetricError,
)
from favoa.model import FavoaParams, ModelConfig

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "FavoaError",
    "FormatError",
    "NumericError",
    "UndefinedMetricError",
    "FavoaParams",
    "ModelConfig",
]
__version__ = "0.1.0"
