"""Desk-scale laboratory for dynamic early-exit vision transformers."""

__version__ = "0.1.0"

from .autograd import Tensor, backward, no_grad
from .vit import ViTConfig, ViTModel

__all__ = ["Tensor", "backward", "no_grad", "ViTConfig", "ViTModel", "__version__"]
