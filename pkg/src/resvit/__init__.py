"""Residual vision-transformer GAN for multi-modal image synthesis, on numpy."""

from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .data import Dataset, TaskConfig, generate_phantom_dataset, load_dataset
from .discriminator import PatchDiscriminator
from .errors import ConfigError, ContractError, DataError, DimensionError, NumericError, ResViTError
from .generator import Generator, ModelConfig
from .metrics import frechet_distance, psnr, ssim
from .tensor import Tensor
from .trainer import TrainConfig, Trainer

__all__ = [
    "Checkpoint", "ConfigError", "ContractError", "DataError", "Dataset", "DimensionError",
    "Generator", "ModelConfig", "NumericError", "PatchDiscriminator", "ResViTError",
    "TaskConfig", "Tensor", "TrainConfig", "Trainer", "frechet_distance",
    "generate_phantom_dataset", "load_dataset", "psnr", "read_checkpoint", "ssim",
    "write_checkpoint",
]
__version__ = "0.1.0"
