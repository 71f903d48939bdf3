"""Differential-attention Siamese change detection for bi-temporal SAR flood mapping."""

from .config import LossConfig, ModelConfig, TileScheme, TrainConfig
from .model import DAMNet, build, load_checkpoint, save_checkpoint, set_deterministic

__version__ = "0.1.0"
