from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import MLP, Linear, Module
from .optim import AdamW, NonFiniteGradientError
from .tape import ShapeError, Tape, Tensor

__all__ = [
    "AdamW", "Linear", "MLP", "Module", "NonFiniteGradientError", "ShapeError",
    "Tape", "Tensor", "load_checkpoint", "ops", "save_checkpoint",
]
