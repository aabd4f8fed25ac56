import pytest
import torch

from scenepose.config.settings import BackboneSpec, ConfigError, TapSpec, reference_backbone_spec
from scenepose.models.backbone import (EfficientNetBackbone, ReferenceBackbone, build_backbone,
                                       efficientnet_backbone_spec, reference_backbone_parameter_count)


def test_reference_backbone_shapes():
    backbone = build_backbone(reference_backbone_spec(64))
    maps = backbone(torch.rand(2, 3, 64, 64))
    assert isinstance(backbone, ReferenceBackbone)
    assert maps.position.shape == (2, 32, 4, 4)
    assert maps.orientation.shape == (2, 16, 8, 8)


def test_reference_backbone_same_resolution_taps():
    spec = BackboneSpec('reference', 12, TapSpec(6, 6, 8), TapSpec(6, 6, 8))
    maps = build_backbone(spec)(torch.rand(1, 3, 12, 12))
    assert maps.position.shape == (1, 8, 6, 6)
    assert maps.orientation.shape == (1, 8, 6, 6)


def test_reference_backbone_parameter_count():
    spec = reference_backbone_spec(64)
    backbone = build_backbone(spec)
    assert reference_backbone_parameter_count(spec) == sum(p.numel() for p in backbone.parameters())


def test_wrong_input_size_rejected():
    backbone = build_backbone(reference_backbone_spec(64))
    with pytest.raises(ConfigError):
        backbone(torch.rand(1, 3, 32, 32))


def test_unreachable_tap_rejected():
    spec = BackboneSpec('reference', 64, TapSpec(5, 5, 32), TapSpec(8, 8, 16))
    with pytest.raises(ConfigError):
        build_backbone(spec)


def test_efficientnet_reference_shapes():
    spec = efficientnet_backbone_spec(224)
    assert spec.position_tap.as_tuple() == (14, 14, 112)
    assert spec.orientation_tap.as_tuple() == (28, 28, 40)
    backbone = build_backbone(spec).eval()
    assert isinstance(backbone, EfficientNetBackbone)
    with torch.no_grad():
        maps = backbone(torch.rand(1, 3, 224, 224))
    assert maps.position.shape == (1, 112, 14, 14)
    assert maps.orientation.shape == (1, 40, 28, 28)


def test_efficientnet_endpoint_validation():
    with pytest.raises(ConfigError):
        efficientnet_backbone_spec(224, position_endpoint=4)
    with pytest.raises(ConfigError):
        build_backbone(BackboneSpec('efficientnet_b0', 224, TapSpec(14, 14, 100), TapSpec(28, 28, 40)))


def test_backbone_deterministic_in_eval():
    backbone = build_backbone(reference_backbone_spec(32)).eval()
    images = torch.rand(1, 3, 32, 32)
    assert torch.equal(backbone(images).position, backbone(images).position)
