from .core import Node, ShapeError, Tensor, add, as_tensor, concat, exp, log, matmul, mean, mul, reshape, sum_
from .gradcheck import grad_check
from .nn import (
    BatchNormState,
    activation,
    batchnorm,
    binary_cross_entropy,
    conv2d,
    conv_transpose2d,
    cross_entropy,
    global_avg_pool,
    l2_normalize,
    linear,
    maxpool2,
    relu,
    sigmoid,
)
from .params import ModelParams, he_init, zeros_param
from .rng import RngStream

__all__ = [
    "BatchNormState", "ModelParams", "Node", "RngStream", "ShapeError", "Tensor",
    "activation", "add", "as_tensor", "batchnorm", "binary_cross_entropy", "concat",
    "conv2d", "conv_transpose2d", "cross_entropy", "exp", "global_avg_pool", "grad_check",
    "he_init", "l2_normalize", "linear", "log", "matmul", "maxpool2", "mean", "mul",
    "relu", "reshape", "sigmoid", "sum_", "zeros_param",
]
