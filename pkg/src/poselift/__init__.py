"""Unsupervised adversarial lifting of 2D human poses to 3D."""

from .models import Discriminator, LifterModel, Representation
from .skeleton import KeypointSchema, default_schema
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Discriminator",
    "KeypointSchema",
    "LifterModel",
    "Representation",
    "TrainConfig",
    "__version__",
    "default_schema",
    "train",
]
