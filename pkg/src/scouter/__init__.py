"""Explainable image classification with per-category slot attention."""
from .config import DataConfig, TrainConfig, dump_config, load_config
from .errors import (
    ConfigError,
    ConsistencyError,
    CorruptionError,
    DimensionError,
    FormatError,
    NonFiniteError,
    PrerequisiteError,
    ScouterError,
    UndefinedMetricError,
    UpgradeError,
    UsageError,
    ValidationError,
)
from .model import Classifier, ModelConfig
from .tensor import Tensor, no_grad, precision
from .trainer import load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
