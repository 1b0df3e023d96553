from .config import DYNAMIC, ConfigError, TrainConfig
from .train import (
    CheckpointError,
    TrainingAborted,
    evaluate,
    evaluate_samples,
    fit,
    load_checkpoint,
    train,
)

__all__ = [
    "DYNAMIC",
    "CheckpointError",
    "ConfigError",
    "TrainConfig",
    "TrainingAborted",
    "evaluate",
    "evaluate_samples",
    "fit",
    "load_checkpoint",
    "train",
]
