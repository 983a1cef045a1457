"""UltraSeg: a CPU-only training and inference engine for sub-0.3M-parameter polyp segmentation networks."""

from . import kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    NumericalError,
    ShapeError,
    UltrasegError,
)
from .metrics import dice, evaluate, hd95, iou
from .train import TrainConfig, fit
from .zoo import VARIANTS, ModelConfig, build, config_for, count_flops, count_params

__version__ = "0.1.0"

__all__ = [
    "kernels",
    "load_checkpoint",
    "save_checkpoint",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DataError",
    "NumericalError",
    "ShapeError",
    "UltrasegError",
    "dice",
    "evaluate",
    "hd95",
    "iou",
    "TrainConfig",
    "fit",
    "VARIANTS",
    "ModelConfig",
    "build",
    "config_for",
    "count_flops",
    "count_params",
]
