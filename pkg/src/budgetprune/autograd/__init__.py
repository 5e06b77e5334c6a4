from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    batchnorm2d,
    binarize_ste,
    concat,
    conv2d,
    conv_output_size,
    exp,
    flip_width,
    global_avg_pool,
    grad_enabled,
    linear,
    log,
    masked_conv2d,
    matmul,
    max_pool2d,
    mean_all,
    mul,
    no_grad,
    relu,
    reshape,
    softmax_cross_entropy,
    sub,
    sum_all,
    take_channels,
)

__all__ = [
    "ShapeError", "Tensor", "add", "as_tensor", "batchnorm2d", "binarize_ste", "concat", "conv2d",
    "conv_output_size", "exp", "flip_width", "global_avg_pool", "grad_enabled", "linear", "log",
    "masked_conv2d", "matmul", "max_pool2d", "mean_all", "mul", "no_grad", "relu", "reshape",
    "softmax_cross_entropy", "sub", "sum_all", "take_channels",
]
