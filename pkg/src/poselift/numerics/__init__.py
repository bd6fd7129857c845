"""Dense tensors, reverse-mode gradients, residual layers and Adam."""

from .autodiff import Tape, Var, backward, grad_of
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .layers import MLPSpec, ResidualMLP, linear_forward, residual_block, residual_block_forward
from .optim import adam_step
from .params import ParamStore

__all__ = [
    "MLPSpec",
    "ParamStore",
    "ResidualMLP",
    "Tape",
    "Var",
    "adam_step",
    "backward",
    "grad_of",
    "linear_forward",
    "load_checkpoint",
    "read_header",
    "residual_block",
    "residual_block_forward",
    "save_checkpoint",
]
