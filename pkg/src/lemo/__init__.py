"""Learned motion priors for scene-aware body fitting, desk-scale artifact."""

from . import autodiff
from .autodiff import Tensor

__all__ = ["autodiff", "Tensor"]
__version__ = "0.1.0"
