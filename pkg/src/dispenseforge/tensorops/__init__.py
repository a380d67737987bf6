from .nn import (
    FLAT,
    LOGISTIC,
    POOL,
    RELU,
    UP,
    LayerSpec,
    Sequential,
    binary_cross_entropy,
    binary_cross_entropy_with_logits,
    conv,
    conv2d,
    dense,
    fc,
    maxpool2d,
    squared_error,
    upsample2d,
)
from .optim import Adam, AdamState, adam_step
from .serialize import load_weights, save_weights
from .tensor import (
    DTYPE,
    Tensor,
    add,
    as_tensor,
    clip,
    concat,
    div,
    exp,
    flatten,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    sqrt,
    stack,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "FLAT",
    "LOGISTIC",
    "POOL",
    "RELU",
    "UP",
    "LayerSpec",
    "Sequential",
    "binary_cross_entropy",
    "binary_cross_entropy_with_logits",
    "conv",
    "conv2d",
    "dense",
    "fc",
    "maxpool2d",
    "squared_error",
    "upsample2d",
    "Adam",
    "AdamState",
    "adam_step",
    "load_weights",
    "save_weights",
    "DTYPE",
    "Tensor",
    "add",
    "as_tensor",
    "clip",
    "concat",
    "div",
    "exp",
    "flatten",
    "log",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "power",
    "relu",
    "reshape",
    "sigmoid",
    "sqrt",
    "stack",
    "sub",
    "transpose",
    "tsum",
]
