"""Minimal reverse-mode autodiff: tensors, MLPs, Adam."""

from .engine import (
    Tensor, abs, add, astype, check_finite, clip, concat, cos, cross, detach, div, dot, exp, gather,
    index, log, matmul, maximum, mean, minimum, mul, neg, no_grad, norm, normalize, power,
    precision, relu, reshape, scatter_add, sigmoid, sin, softplus, sqrt, square, stack, sub,
    tanh, tensor, transpose, tsum, where,
)
from .engine import tsum as sum  # noqa: A001
from .nn import MLP, mlp_forward
from .optim import Adam, AdamState, adam_step
from .gradcheck import check_gradients, numerical_grad, relative_error

__all__ = [
    "Tensor", "abs", "add", "astype", "check_finite", "clip", "concat", "cos", "cross", "detach", "div",
    "dot", "exp", "gather", "index", "log", "matmul", "maximum", "mean", "minimum", "mul", "neg",
    "no_grad", "norm", "normalize", "power", "precision", "relu", "reshape", "scatter_add",
    "sigmoid", "sin", "softplus", "sqrt", "square", "stack", "sub", "tanh", "tensor",
    "transpose", "tsum", "sum", "where", "MLP", "mlp_forward", "Adam", "AdamState", "adam_step",
    "check_gradients", "numerical_grad", "relative_error",
]
