"""Minimal reverse-mode differentiation substrate for the pipeline."""

from .array import (
    DualArray,
    absval,
    add,
    as_dual,
    broadcast_to,
    concat,
    cos,
    custom_op,
    div,
    elu,
    exp,
    linear,
    log,
    make_sparse_gather,
    matmul,
    clamp,
    maximum,
    maximum_const,
    minimum_const,
    mean,
    mul,
    pad,
    permute,
    reshape,
    sigmoid,
    sin,
    slice_,
    softmax,
    sparse_matmul,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    take,
    variance,
)
from .gradcheck import grad_check, grad_check_multi
from .params import (
    CheckpointError,
    CheckpointMismatch,
    ParamStore,
    glorot_uniform,
    load_checkpoint,
    save_checkpoint,
)
from .tape import GradientMap, Tape, backward, no_grad

__all__ = [
    "DualArray", "Tape", "GradientMap", "backward", "no_grad",
    "add", "sub", "mul", "div", "matmul", "sparse_matmul", "exp", "log",
    "sqrt", "sin", "cos", "elu", "sigmoid", "square", "absval", "sum_",
    "mean", "variance", "reshape", "permute", "broadcast_to", "concat",
    "stack", "slice_", "pad", "take", "maximum", "maximum_const", "minimum_const", "clamp",
    "softmax", "as_dual", "custom_op", "linear", "make_sparse_gather", "grad_check",
    "grad_check_multi", "ParamStore", "save_checkpoint", "load_checkpoint",
    "CheckpointError", "CheckpointMismatch", "glorot_uniform",
]
