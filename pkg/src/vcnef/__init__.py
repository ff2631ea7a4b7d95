"""Vectorized conditional neural fields for time-dependent parametric PDEs."""
from .data import Dataset, generate_dataset, read_dataset, write_dataset
from .model import ModelConfig, VCNeF, forward, init_params
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "Dataset", "ModelConfig", "TrainConfig", "VCNeF", "forward", "generate_dataset", "init_params",
    "load_checkpoint", "read_dataset", "save_checkpoint", "train", "write_dataset",
]
__version__ = "0.1.0"
