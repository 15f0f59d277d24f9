from . import tensor as ops
from .checkpoint import CheckpointError, CheckpointVersionError, CorruptCheckpointError
from .gradcheck import grad_check
from .nn import MLP, LayerNorm, Linear, Module
from .optim import Adam, AdamState, adam_step
from .rng import RngStreams
from .tensor import (NumericError, ShapeError, Tape, TapeError, Tensor, default_dtype,
                     get_default_dtype, no_tape)

__all__ = [
    "Adam", "AdamState", "CheckpointError", "CheckpointVersionError", "CorruptCheckpointError",
    "LayerNorm", "Linear", "MLP", "Module", "NumericError", "RngStreams", "ShapeError", "Tape",
    "TapeError", "Tensor", "adam_step", "default_dtype", "get_default_dtype", "grad_check",
    "no_tape", "ops",
]
