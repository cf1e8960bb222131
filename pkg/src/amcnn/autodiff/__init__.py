"""Minimal reverse-mode autodiff: exactly the operations the counting network uses."""

from .gradcheck import check_parameters, grad_check, relative_error
from .ops import (
    activation,
    add,
    add_scalar,
    broadcast_mul,
    concat,
    conv2d,
    maxpool2x2,
    mul,
    relu,
    scale,
    spatial_softmax,
    square,
    sub,
    sum_all,
    tanh,
)
from .optim import adam_step, grad_norm
from .tensor import Function, Parameter, Tensor, as_tensor, backward

__all__ = [
    "Function",
    "Parameter",
    "Tensor",
    "activation",
    "adam_step",
    "add",
    "add_scalar",
    "as_tensor",
    "backward",
    "broadcast_mul",
    "check_parameters",
    "concat",
    "conv2d",
    "grad_check",
    "grad_norm",
    "maxpool2x2",
    "mul",
    "relative_error",
    "relu",
    "scale",
    "spatial_softmax",
    "square",
    "sub",
    "sum_all",
    "tanh",
]
