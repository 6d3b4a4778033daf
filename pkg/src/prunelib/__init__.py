"""Pruning and anomaly detection for small neural networks."""

from . import attacks
from . import checkpoint
from . import data
from . import detection
from . import idx
from . import metrics
from . import pruning
from .models import ModelSpec, Network
from .tensor import Tensor

__all__ = (
    "ModelSpec",
    "Network",
    "Tensor",
    "attacks",
    "checkpoint",
    "data",
    "detection",
    "idx",
    "metrics",
    "pruning",
)

__version__ = "0.1.0"
