from .tensor import (
    Array, NonFiniteError, ShapeError, abs_, add, add_scalar, affine, as_array, backward, concat,
    cos, cross_entropy, detach, exp, layer_norm, log, log_softmax, matmul, mean, mul, neg, power,
    relu, reshape, scale, set_debug, sin, slice_, softmax, stack, sub, sum_, table_lookup, take, transpose,
    variance, zero_grad,
)
from .check import GradCheckReport, grad_check

__all__ = [
    "Array", "NonFiniteError", "ShapeError", "abs_", "add", "add_scalar", "affine", "as_array",
    "backward", "concat", "cos", "cross_entropy", "detach", "exp", "layer_norm", "log",
    "log_softmax", "matmul", "mean", "mul", "neg", "power", "relu", "reshape", "scale", "set_debug",
    "sin", "slice_", "softmax", "stack", "sub", "sum_", "table_lookup", "take", "transpose", "variance",
    "zero_grad", "GradCheckReport", "grad_check",
]
