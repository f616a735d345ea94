from .core import (
    HessianOperator,
    LossGraph,
    NonFiniteError,
    QuadraticGraph,
    ZeroGraph,
    eval_loss,
    fd_gradient,
    fd_hvp,
    gradient,
    hvp,
    value_and_gradient,
)
from .tensor import Tensor, grad, no_record

__all__ = [
    "HessianOperator",
    "LossGraph",
    "NonFiniteError",
    "QuadraticGraph",
    "Tensor",
    "ZeroGraph",
    "eval_loss",
    "fd_gradient",
    "fd_hvp",
    "grad",
    "gradient",
    "hvp",
    "no_record",
    "value_and_gradient",
]
