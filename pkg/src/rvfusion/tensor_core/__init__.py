"""Minimal dense tensors with reverse-mode automatic differentiation."""

from .gradcheck import analytic_grads, grad_check, params_grad_check
from .ops import (
    ConvSpec,
    add,
    channel_affine,
    concat,
    concat_channels,
    conv2d,
    conv_output_size,
    elementwise,
    exp,
    max_pool,
    mul,
    relu,
    reshape,
    sigmoid,
    take,
    transpose,
    upsample2x,
)
from .ops import sum as tsum
from .optim import SGD, msra_init, sgd_step
from .tensor import ContractError, ShapeError, Tensor, as_tensor, grad_enabled, no_grad

__all__ = [
    "Tensor", "ShapeError", "ContractError", "as_tensor", "no_grad", "grad_enabled",
    "ConvSpec", "add", "mul", "relu", "sigmoid", "exp", "elementwise", "tsum", "reshape",
    "concat", "concat_channels", "channel_affine", "conv2d", "conv_output_size", "max_pool",
    "upsample2x", "take", "transpose", "SGD", "msra_init", "sgd_step", "grad_check", "analytic_grads",
    "params_grad_check",
]
