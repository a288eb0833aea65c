"""Hybrid dense-block/capsule image classifier with a self-contained autodiff engine."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad", "__version__"]
