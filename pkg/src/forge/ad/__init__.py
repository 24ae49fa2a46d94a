"""Small numpy autodiff engine used by the network."""

from forge.ad.gradcheck import grad_check
from forge.ad.optim import Adam, AdamState, adam_step
from forge.ad.tensor import (Tensor, add, concat, conv1d, cross_entropy, dropout, get_dtype,
                             layer_norm, log_softmax, matmul, mean, mul, precision, relu,
                             reshape, scale, set_precision, sigmoid, slice_, softmax,
                             squared_relu, stop_gradient, sum_, swish, transpose)

__all__ = [
    "Tensor", "add", "concat", "conv1d", "cross_entropy", "dropout", "get_dtype", "layer_norm",
    "log_softmax", "matmul", "mean", "mul", "precision", "relu", "reshape", "scale",
    "set_precision", "sigmoid", "slice_", "softmax", "squared_relu", "stop_gradient", "sum_",
    "swish", "transpose", "grad_check", "Adam", "AdamState", "adam_step",
]
