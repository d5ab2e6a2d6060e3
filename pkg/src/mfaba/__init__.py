"""Gradient-ascent boundary attribution for small numpy classifiers."""
from ._accel import backend
from .diffnet import (DatasetSplit, Model, Objective, build_model, cnn, init_model, load_model,
                      mlp, save_model, train)

__version__ = "0.1.0"

__all__ = [
    "DatasetSplit", "Model", "Objective", "backend", "build_model", "cnn", "init_model",
    "load_model", "mlp", "save_model", "train",
]
