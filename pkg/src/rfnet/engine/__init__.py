from .functional import (
    BatchNormState,
    arctan2,
    batch_norm,
    bilinear_sample,
    conv2d,
    instance_norm,
    l2_normalize,
    leaky_relu,
    relu,
    scale_softmax,
    windowed_softmax,
)
from .gradcheck import grad_check, promoted, relative_error
from .optim import AdamState, Parameter, adam_step, check_unique
from .tensor import ShapeError, Tensor, as_tensor, concatenate, minimum, no_grad, stack, where

__all__ = [
    "AdamState",
    "BatchNormState",
    "Parameter",
    "ShapeError",
    "Tensor",
    "adam_step",
    "arctan2",
    "as_tensor",
    "batch_norm",
    "bilinear_sample",
    "check_unique",
    "concatenate",
    "conv2d",
    "grad_check",
    "instance_norm",
    "l2_normalize",
    "leaky_relu",
    "minimum",
    "no_grad",
    "promoted",
    "relative_error",
    "relu",
    "scale_softmax",
    "stack",
    "where",
    "windowed_softmax",
]
