"""Mixture-alignment non-autoregressive acoustic model with a flow post-net."""

from .config import ModelConfig, load_config
from .corpus import MelSpectrogram, load_mel, save_mel
from .model import AcousticModel

__version__ = "0.1.0"

__all__ = ["AcousticModel", "MelSpectrogram", "ModelConfig", "load_config", "load_mel", "save_mel"]
