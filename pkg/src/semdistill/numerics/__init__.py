"""Minimal differentiable tensor substrate used by the restorers and losses."""

from .gradcheck import check_tensor_grads, numerical_grad, relative_error
from .ops import (clamp01, concat_channels, conv2d, elementwise, mean, mul, reduce, relu, scale,
                  slice_channels, sub, sum_, add)
from .optim import Adam, OptimizerState
from .serialize import FormatError, load_tensor, read_tensor_from, save_tensor, tensor_bytes, write_tensor_to
from .tensor import Parameter, ShapeError, Tensor, backward, detach, is_grad_enabled, make_result, no_grad

__all__ = [
    "Adam", "FormatError", "OptimizerState", "Parameter", "ShapeError", "Tensor", "add", "backward",
    "check_tensor_grads", "clamp01", "concat_channels", "conv2d", "detach", "elementwise",
    "is_grad_enabled", "load_tensor", "make_result", "mean", "mul", "no_grad", "numerical_grad",
    "read_tensor_from", "reduce", "relative_error", "relu", "save_tensor", "scale", "slice_channels",
    "sub", "sum_", "tensor_bytes", "write_tensor_to",
]
