"""Dense-tensor arithmetic with reverse-mode differentiation and AdamW."""

from .checkpoint import Checkpoint
from .optim import AdamWState, adamw_step
from .params import ParamSet, finite_difference_grad, forward_backward, max_relative_error
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    embedding,
    getitem,
    log_softmax,
    matmul,
    mean,
    mul,
    reshape,
    rms_norm,
    silu,
    softmax,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "AdamWState", "Checkpoint", "ParamSet", "Tensor",
    "adamw_step", "finite_difference_grad", "forward_backward", "max_relative_error",
    "add", "as_tensor", "concat", "embedding", "getitem", "log_softmax", "matmul",
    "mean", "mul", "reshape", "rms_norm", "silu", "softmax", "sub", "transpose", "tsum",
]
