from .tensor import Tensor, enable_grad, grad, no_grad
from . import functional

__all__ = ["Tensor", "enable_grad", "functional", "grad", "no_grad"]
