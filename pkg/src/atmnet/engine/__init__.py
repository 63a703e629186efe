"""Minimal reverse-mode array engine."""
from .tensor import Array, Tape, backward, current_tape
from .ops import (
    add, sub, mul, scale, gelu, sum, mean, reshape, transpose, swap_hw, concat,
    slice_last, global_avg_pool, upsample_nearest2x, affine, layer_norm,
    softmax_groups, cross_entropy, gather_interp_1d, depthwise_conv2d, conv2d,
    strided_conv2d, conv_output_extent,
)
from .gradcheck import numeric_grad, check_grad, rel_error

__all__ = [
    "Array", "Tape", "backward", "current_tape",
    "add", "sub", "mul", "scale", "gelu", "sum", "mean", "reshape", "transpose",
    "swap_hw", "concat", "slice_last", "global_avg_pool", "upsample_nearest2x",
    "affine", "layer_norm", "softmax_groups", "cross_entropy", "gather_interp_1d",
    "depthwise_conv2d", "conv2d", "strided_conv2d", "conv_output_extent",
    "numeric_grad", "check_grad", "rel_error",
]
