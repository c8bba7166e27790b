from .checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from .net import ConfigError, Model, NetConfig, StemConfig, build_model, desk_config, full_config, spatial_plan
from .train import (
    SGD,
    TrainConfig,
    TrainingDiverged,
    augment,
    augment_batch,
    cosine_lr,
    crop_and_flip,
    evaluate_clean,
    fit_normalization,
    full_train_config,
    predict,
    train,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "Model",
    "NetConfig",
    "SGD",
    "StemConfig",
    "TrainConfig",
    "TrainingDiverged",
    "augment",
    "augment_batch",
    "build_model",
    "cosine_lr",
    "crop_and_flip",
    "desk_config",
    "evaluate_clean",
    "fit_normalization",
    "full_config",
    "full_train_config",
    "load_checkpoint",
    "predict",
    "read_header",
    "save_checkpoint",
    "spatial_plan",
    "train",
]
