from .optim import Optimizer, clip_grad_norm
from .schedule import LrSchedule, schedule_lr
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    dropout,
    einsum,
    embedding,
    exp,
    expand_dims,
    getitem,
    l2_norm,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    softmax,
    sqrt,
    squeeze,
    stack,
    sub,
    swapaxes,
    tanh,
    transpose,
    tsum,
    where,
)

__all__ = [
    "LrSchedule", "Optimizer", "Tensor", "add", "as_tensor", "backward", "clip_grad_norm",
    "concat", "div", "dropout", "einsum", "embedding", "exp", "expand_dims", "getitem",
    "l2_norm", "layer_norm", "log", "log_softmax", "matmul", "mean", "mul", "neg", "no_grad",
    "power", "relu", "reshape", "schedule_lr", "softmax", "sqrt", "squeeze", "stack", "sub",
    "swapaxes", "tanh", "transpose", "tsum", "where",
]
