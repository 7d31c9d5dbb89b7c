"""Sparse graph learning with knowledge transfer for visual dialog, on a numpy autograd engine."""

from .config import TrainConfig
from .data import Dataset, DialogInstance, GeneratorConfig
from .model import SGLModel

__version__ = "0.1.0"

__all__ = ["TrainConfig", "Dataset", "DialogInstance", "GeneratorConfig", "SGLModel"]
