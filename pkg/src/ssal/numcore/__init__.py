"""Deterministic numpy autodiff core: tensors, layers, optimizer, gradient checker."""

from .gradcheck import finite_difference_check
from .ops import (
    BatchNormState,
    DegenerateBatchError,
    DimensionError,
    LabelError,
    NormalizationError,
    add,
    batchnorm,
    conv2d,
    global_avg_pool,
    l2_normalize,
    linear,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
    total,
)
from .optim import MissingGradientError, SgdState, StepLrSchedule, lr_at, sgd_step
from .tensor import GraphError, Tape, Tensor, grad_enabled, no_grad

__all__ = [
    "BatchNormState",
    "DegenerateBatchError",
    "DimensionError",
    "GraphError",
    "LabelError",
    "MissingGradientError",
    "NormalizationError",
    "SgdState",
    "StepLrSchedule",
    "Tape",
    "Tensor",
    "add",
    "batchnorm",
    "conv2d",
    "finite_difference_check",
    "global_avg_pool",
    "grad_enabled",
    "l2_normalize",
    "linear",
    "lr_at",
    "matmul",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "scale",
    "sgd_step",
    "softmax_cross_entropy",
    "total",
]
