"""Discrete adversarial training: a numpy autograd engine, an image discretizer and the training loop."""
from .tensor import Tensor, grad, no_grad, precision

__all__ = ["Tensor", "grad", "no_grad", "precision"]
__version__ = "0.1.0"
