"""Fully convolutional compressive sensing: measurement, reconstruction and evaluation on numpy."""

from .errors import ConvCSError
from .models import ARCHS, build_model
from .training import Checkpoint, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = ["ARCHS", "Checkpoint", "ConvCSError", "TrainConfig", "build_model", "evaluate", "train"]
