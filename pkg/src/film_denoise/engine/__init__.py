"""Numpy-backed reverse-mode autodiff: tensors, tape, ops, Adam."""

from .tensor import (
    EngineError,
    NumericsError,
    Parameter,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    active_tape,
    backward,
    grad_check,
    record_op,
    set_strict_numerics,
    strict_numerics,
)
from .ops import (
    affine_modulate,
    concat_channels,
    conv2d,
    dense,
    maxpool2d,
    mse_loss,
    relu,
    upsample_nearest,
)
from .optim import Adam

__all__ = [
    "EngineError",
    "NumericsError",
    "Parameter",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "active_tape",
    "backward",
    "grad_check",
    "record_op",
    "set_strict_numerics",
    "strict_numerics",
    "affine_modulate",
    "concat_channels",
    "conv2d",
    "dense",
    "maxpool2d",
    "mse_loss",
    "relu",
    "upsample_nearest",
    "Adam",
]
