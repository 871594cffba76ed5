from .tensor import Tape, Tensor, backward, current_tape, no_grad, tape_scope
from .ops import (
    RunningStats,
    activation,
    add,
    batchnorm2d,
    bce_with_logits,
    concat,
    conv2d,
    dropout,
    lstm_update,
    maxpool2,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    slice_axis,
    stack,
    sub,
    take,
    tanh,
    transpose,
    upsample_nearest2,
)
from .optim import Adam, AdamState, adam_step
from .gradcheck import check_gradients, check_module_gradients, numeric_grad, relative_error

__all__ = [
    "Adam", "AdamState", "RunningStats", "Tape", "Tensor", "activation", "adam_step", "add",
    "backward", "batchnorm2d", "bce_with_logits", "check_gradients", "check_module_gradients", "concat", "conv2d",
    "current_tape", "dropout", "lstm_update", "maxpool2", "mean", "mul", "no_grad", "numeric_grad",
    "relative_error", "relu", "reshape", "sigmoid", "slice_axis", "stack", "sub", "take",
    "tanh", "tape_scope", "transpose", "upsample_nearest2",
]
