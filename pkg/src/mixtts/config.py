"""Model hyperparameters and the shipped presets.

Preset files are flat ``key: value`` YAML whose keys mirror the rows of the
hyperparameter table (phoneme embedding, encoder layers, ...).  The config
fingerprint is the SHA-256 of the canonical (sorted-key) text and is what
checkpoints are matched against.
"""

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import yaml

PRESETS = ("normal", "small", "micro", "toy")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    # linguistic encoder
    phoneme_embedding: int = 192
    encoder_layers: int = 4
    hidden_size: int = 192
    conv1d_kernel: int = 5
    conv1d_filter_size: int = 768
    attention_heads: int = 2
    relative_window: int = 16
    duration_kernel: int = 3
    dropout: float = 0.1
    vocab_size: int = 80
    # variational generator
    vg_encoder_layers: int = 8
    vg_encoder_kernel: int = 5
    vg_decoder_layers: int = 4
    vg_decoder_kernel: int = 5
    vg_channels: int = 192
    latent_size: int = 16
    vp_flow_steps: int = 4
    vp_flow_layers: int = 4
    vp_flow_channels: int = 64
    vp_flow_kernel: int = 3
    temporal_stride: int = 4
    # post-net
    postnet_wavenet_layers: int = 3
    postnet_wavenet_kernel: int = 3
    postnet_wavenet_channels: int = 192
    postnet_flow_steps: int = 12
    postnet_shared_groups: int = 3
    postnet_squeeze: int = 2
    temperature: float = 0.8
    n_mels: int = 80

    def __post_init__(self):
        ints = [f.name for f in fields(self) if f.type in (int, "int")]
        for name in ints:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_size % self.attention_heads:
            raise ConfigError("hidden_size must be divisible by attention_heads")
        if self.latent_size % 2:
            raise ConfigError("latent_size must be even for coupling splits")
        if self.postnet_shared_groups > self.postnet_flow_steps:
            raise ConfigError(
                f"postnet_shared_groups={self.postnet_shared_groups} exceeds "
                f"postnet_flow_steps={self.postnet_flow_steps}"
            )
        if (self.n_mels * self.postnet_squeeze) % 2:
            raise ConfigError("post-net channel count must be even")
        if self.n_mels != 80:
            raise ConfigError("n_mels must be 80")
        if self.temporal_stride != 4:
            raise ConfigError("temporal_stride is fixed at 4")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.temperature < 0:
            raise ConfigError("temperature must be non-negative")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    def canonical_text(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def fingerprint(self):
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def load_config(source):
    """Load a preset by name or a YAML config file by path."""
    if isinstance(source, ModelConfig):
        return source
    source = str(source)
    if source in PRESETS:
        text = resources.files("mixtts.presets").joinpath(f"{source}.yaml").read_text()
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"no preset or config file named {source!r}")
        text = path.read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError("config file must be a flat key: value mapping")
    return ModelConfig.from_dict(data)


def save_config(config, path):
    Path(path).write_text(config.canonical_text())
