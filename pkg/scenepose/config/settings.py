# scenepose/config/settings.py
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple
import logging
import os

logger = logging.getLogger(__name__)

BACKBONES = ('reference', 'efficientnet_b0')


class ConfigError(ValueError):
    """Custom exception for invalid model or run configuration"""
    pass


def get_device_name() -> str:
    """Default torch device, overridable through the environment"""
    return os.getenv('SCENEPOSE_DEVICE', 'cpu')


@dataclass
class TapSpec:
    """Shape of one backbone activation map (height, width, channels)."""
    height: int
    width: int
    channels: int

    def as_tuple(self) -> Tuple[int, int, int]:
        return (self.height, self.width, self.channels)


@dataclass
class BackboneSpec:
    name: str = 'efficientnet_b0'
    input_size: int = 224
    position_tap: TapSpec = field(default_factory=lambda: TapSpec(14, 14, 112))
    orientation_tap: TapSpec = field(default_factory=lambda: TapSpec(28, 28, 40))

    def validate(self):
        if self.name not in BACKBONES:
            raise ConfigError(f"Unknown backbone '{self.name}', expected one of {BACKBONES}")
        if self.input_size < 1:
            raise ConfigError(f"input_size must be positive, got {self.input_size}")
        for label, tap in (('position_tap', self.position_tap), ('orientation_tap', self.orientation_tap)):
            if min(tap.as_tuple()) < 1:
                raise ConfigError(f"{label} dimensions must be positive, got {tap.as_tuple()}")
            if tap.height > self.input_size or tap.width > self.input_size:
                raise ConfigError(f"{label} {tap.as_tuple()} is larger than the input size {self.input_size}")


def reference_backbone_spec(input_size: int = 64) -> BackboneSpec:
    """Desk-scale reference CNN: 64x64 input gives 4x4x32 (position) and 8x8x16 (orientation)."""
    return BackboneSpec(
        name='reference',
        input_size=input_size,
        position_tap=TapSpec(input_size // 16, input_size // 16, 32),
        orientation_tap=TapSpec(input_size // 8, input_size // 8, 16),
    )


@dataclass
class ModelConfig:
    num_scenes: int = 1
    token_dim: int = 256
    num_layers: int = 6
    num_heads: int = 4
    mlp_hidden_dim: int = 256
    dropout: float = 0.1
    num_position_clusters: int = 4
    num_orientation_clusters: int = 4
    head_hidden_dim: int = 1024
    shared_centroid_heads: bool = False
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    def validate(self) -> "ModelConfig":
        if self.num_scenes < 1:
            raise ConfigError(f"num_scenes must be >= 1, got {self.num_scenes}")
        if self.token_dim < 2 or self.token_dim % 2 != 0:
            raise ConfigError(f"token_dim must be even for the axis-split positional encoding, got {self.token_dim}")
        if self.num_heads < 1 or self.token_dim % self.num_heads != 0:
            raise ConfigError(f"num_heads ({self.num_heads}) must divide token_dim ({self.token_dim})")
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be >= 0, got {self.num_layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.num_position_clusters < 1 or self.num_orientation_clusters < 1:
            raise ConfigError("Cluster counts K_x and K_q must be >= 1")
        if self.mlp_hidden_dim < 1 or self.head_hidden_dim < 1:
            raise ConfigError("Hidden dimensions must be positive")
        self.backbone.validate()
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "ModelConfig":
        values = dict(values)
        backbone = dict(values.pop('backbone', {}) or {})
        for tap in ('position_tap', 'orientation_tap'):
            if tap in backbone and isinstance(backbone[tap], dict):
                backbone[tap] = TapSpec(**backbone[tap])
        try:
            return cls(backbone=BackboneSpec(**backbone), **values)
        except TypeError as e:
            raise ConfigError(f"Invalid model configuration: {e}")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-4
    lr_halving_interval: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-10
    seed: int = 0
    num_position_clusters: int = 4
    num_orientation_clusters: int = 4
    checkpoint_interval: int = 0
    grad_clip: Optional[float] = None
    init_s_x: float = 0.0
    init_s_q: float = -3.0
    num_workers: int = 0
    device: str = field(default_factory=get_device_name)

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.lr_halving_interval < 1:
            raise ConfigError(f"lr_halving_interval must be >= 1, got {self.lr_halving_interval}")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0 (0 disables periodic checkpoints)")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be positive when set, got {self.grad_clip}")
        return self


@dataclass
class AugmentationConfig:
    resize: int = 256
    crop_size: int = 224
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    seed: int = 0

    def validate(self) -> "AugmentationConfig":
        if self.crop_size < 1 or self.resize < 1:
            raise ConfigError("resize and crop_size must be positive")
        if self.crop_size > self.resize:
            raise ConfigError(f"crop_size ({self.crop_size}) must not exceed resize ({self.resize})")
        for name in ('brightness', 'contrast', 'saturation'):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} jitter must be non-negative")
        return self


@dataclass
class BenchConfig:
    trials: int = 20
    warmup: int = 3
    batch_size: int = 1

    def validate(self) -> "BenchConfig":
        if self.trials < 1 or self.warmup < 0 or self.batch_size < 1:
            raise ConfigError("bench needs trials >= 1, warmup >= 0 and batch_size >= 1")
        return self
