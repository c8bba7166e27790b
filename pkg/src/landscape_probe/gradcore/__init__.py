"""Minimal deterministic reverse-mode differentiation on numpy arrays."""

from .gradcheck import grad_check, grad_check_params, numerical_gradient, relative_error
from .ops import (
    BatchNormNotReady,
    BatchNormState,
    NonFiniteError,
    add,
    add_residual,
    batchnorm2d,
    channel_affine,
    conv2d,
    conv_output_size,
    global_avg_pool,
    layer_forward,
    linear,
    mul,
    per_sample_cross_entropy,
    relu,
    softmax_cross_entropy,
    square,
)
from .ops import sum as tensor_sum
from .tensor import Parameter, Tape, TapeError, Tensor, active_tape, backward

__all__ = [
    "BatchNormNotReady",
    "BatchNormState",
    "NonFiniteError",
    "Parameter",
    "Tape",
    "TapeError",
    "Tensor",
    "active_tape",
    "add",
    "add_residual",
    "backward",
    "batchnorm2d",
    "channel_affine",
    "conv2d",
    "conv_output_size",
    "global_avg_pool",
    "grad_check",
    "grad_check_params",
    "layer_forward",
    "linear",
    "mul",
    "numerical_gradient",
    "per_sample_cross_entropy",
    "relative_error",
    "relu",
    "softmax_cross_entropy",
    "square",
    "tensor_sum",
]
