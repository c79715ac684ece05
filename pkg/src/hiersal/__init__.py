"""Hierarchical multi-branch video saliency prediction on a small autodiff core."""

from .kernels import backend as kernel_backend
from .tensor import Tensor, record_tape

__version__ = "0.1.0"

__all__ = ["Tensor", "record_tape", "kernel_backend", "__version__"]
