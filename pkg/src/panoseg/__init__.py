"""Distortion-aware panoramic semantic segmentation toolkit."""

__version__ = "0.1.0"

from . import adapt, autodiff, checkpoint, data, deform, evalkit, geometry, model, optim

__all__ = [
    "adapt",
    "autodiff",
    "checkpoint",
    "data",
    "deform",
    "evalkit",
    "geometry",
    "model",
    "optim",
    "__version__",
]
