"""Relational transformer for joint image captioning and scene-graph
prediction, with a reverse-mode autodiff core and a verifiable
train/evaluate pipeline.
"""

from .model import ReFormer, ReFormerConfig
from .tensor import Tape, Tensor

__all__ = ["ReFormer", "ReFormerConfig", "Tape", "Tensor"]
__version__ = "0.1.0"
