"""Convolutional backbones emitting the position (A_x) and orientation (A_q) activation maps."""
from typing import List, NamedTuple
import logging
import math

import torch
import torch.nn as nn

from scenepose.config.settings import BackboneSpec, ConfigError, TapSpec

logger = logging.getLogger(__name__)

# torchvision efficientnet_b0 feature stages: index -> (stride, channels) at the end of the stage
EFFICIENTNET_B0_ENDPOINTS = {
    1: (2, 16),
    2: (4, 24),
    3: (8, 40),
    5: (16, 112),
    7: (32, 320),
}


class ActivationMaps(NamedTuple):
    """Backbone outputs in NCHW layout."""
    position: torch.Tensor
    orientation: torch.Tensor


def _check_input(images: torch.Tensor, spec: BackboneSpec):
    if images.dim() != 4 or images.shape[1] != 3:
        raise ConfigError(f"Expected images of shape [B, 3, H, W], got {tuple(images.shape)}")
    if images.shape[-2] != spec.input_size or images.shape[-1] != spec.input_size:
        raise ConfigError(f"Backbone expects {spec.input_size}x{spec.input_size} inputs, "
                          f"got {images.shape[-2]}x{images.shape[-1]}")


def _stride_steps(source: int, target: int, label: str) -> int:
    if target > source or source % target != 0 or (source // target) & (source // target - 1):
        raise ConfigError(f"{label}: resolution {target} must be {source} divided by a power of two")
    return int(math.log2(source // target))


def _conv(in_channels: int, out_channels: int, stride: int) -> nn.Module:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1),
        nn.GELU(),
    )


def reference_stage_channels(spec: BackboneSpec) -> List[List[int]]:
    """(in, out, stride) triples of every conv in the reference backbone, grouped by tap."""
    position, orientation = spec.position_tap, spec.orientation_tap
    if position.height != position.width or orientation.height != orientation.width:
        raise ConfigError("The reference backbone only produces square activation maps")
    to_orientation = _stride_steps(spec.input_size, orientation.height, 'orientation_tap')
    to_position = _stride_steps(orientation.height, position.height, 'position_tap')

    stem = []
    channels = 3
    for step in range(to_orientation):
        out = orientation.channels if step == to_orientation - 1 else min(orientation.channels, 8 * 2 ** step)
        stem.append([channels, out, 2])
        channels = out
    if not stem:
        stem.append([channels, orientation.channels, 1])
        channels = orientation.channels

    head = []
    for step in range(to_position):
        out = position.channels if step == to_position - 1 else channels
        head.append([channels, out, 2])
        channels = out
    if not head:
        head.append([channels, position.channels, 1])
    return [stem, head]


class ReferenceBackbone(nn.Module):
    """Small strided CNN with two tap points for desk-scale training."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        stem, head = reference_stage_channels(spec)
        self.orientation_stage = nn.Sequential(*[_conv(i, o, s) for i, o, s in stem])
        self.position_stage = nn.Sequential(*[_conv(i, o, s) for i, o, s in head])

    def forward(self, images: torch.Tensor) -> ActivationMaps:
        _check_input(images, self.spec)
        orientation_map = self.orientation_stage(images)
        position_map = self.position_stage(orientation_map)
        return ActivationMaps(position=position_map, orientation=orientation_map)


class EfficientNetBackbone(nn.Module):
    """torchvision EfficientNet-B0 features (randomly initialised) tapped at two endpoints."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        from torchvision.models import efficientnet_b0

        self.spec = spec
        self.position_endpoint = self._endpoint_for(spec.position_tap, spec.input_size, 'position_tap')
        self.orientation_endpoint = self._endpoint_for(spec.orientation_tap, spec.input_size, 'orientation_tap')
        last = max(self.position_endpoint, self.orientation_endpoint)
        self.features = efficientnet_b0(weights=None).features[:last + 1]

    @staticmethod
    def _endpoint_for(tap: TapSpec, input_size: int, label: str) -> int:
        for index, (stride, channels) in EFFICIENTNET_B0_ENDPOINTS.items():
            size = math.ceil(input_size / stride)
            if channels == tap.channels and size == tap.height and size == tap.width:
                return index
        raise ConfigError(f"{label} {tap.as_tuple()} is not an EfficientNet-B0 endpoint for "
                          f"{input_size}x{input_size} inputs")

    def forward(self, images: torch.Tensor) -> ActivationMaps:
        _check_input(images, self.spec)
        taps = {}
        x = images
        for index, stage in enumerate(self.features):
            x = stage(x)
            if index in (self.position_endpoint, self.orientation_endpoint):
                taps[index] = x
        return ActivationMaps(position=taps[self.position_endpoint], orientation=taps[self.orientation_endpoint])


def build_backbone(spec: BackboneSpec) -> nn.Module:
    spec.validate()
    if spec.name == 'reference':
        return ReferenceBackbone(spec)
    return EfficientNetBackbone(spec)


def reference_backbone_parameter_count(spec: BackboneSpec) -> int:
    return sum(9 * i * o + o for stage in reference_stage_channels(spec) for i, o, _ in stage)


def efficientnet_backbone_spec(input_size: int = 224, position_endpoint: int = 5,
                               orientation_endpoint: int = 3) -> BackboneSpec:
    """EfficientNet-B0 taps by feature-stage index; the defaults give 14x14x112 and 28x28x40 at 224."""
    taps = []
    for label, endpoint in (('position_endpoint', position_endpoint), ('orientation_endpoint', orientation_endpoint)):
        if endpoint not in EFFICIENTNET_B0_ENDPOINTS:
            raise ConfigError(f"{label} must be one of {sorted(EFFICIENTNET_B0_ENDPOINTS)}, got {endpoint}")
        stride, channels = EFFICIENTNET_B0_ENDPOINTS[endpoint]
        size = math.ceil(input_size / stride)
        taps.append(TapSpec(size, size, channels))
    return BackboneSpec(name='efficientnet_b0', input_size=input_size, position_tap=taps[0], orientation_tap=taps[1])
