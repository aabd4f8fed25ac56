import numpy as np
import pytest
import torch
from PIL import Image

from scenepose.config.settings import AugmentationConfig
from scenepose.services.augmentation_service import augment


@pytest.fixture()
def gradient_image():
    """64x48 image whose red channel encodes the column and green the row"""
    xs, ys = np.meshgrid(np.arange(64), np.arange(48))
    pixels = np.stack([xs * 3, ys * 5, np.zeros_like(xs)], axis=-1).astype(np.uint8)
    return Image.fromarray(pixels)


def _crop_offset(image_size, cfg: AugmentationConfig, seed: int):
    """Top-left corner the train transform draws for a seed, after the short-edge resize"""
    width, height = image_size
    # torchvision truncates the long edge
    if width <= height:
        height, width = int(cfg.resize * height / width), cfg.resize
    else:
        height, width = cfg.resize, int(cfg.resize * width / height)
    rng = np.random.default_rng(seed)
    return int(rng.integers(0, height - cfg.crop_size + 1)), int(rng.integers(0, width - cfg.crop_size + 1))


def test_test_mode_center_crop():
    image = Image.fromarray(np.random.default_rng(0).integers(0, 255, (256, 256, 3), dtype=np.uint8))
    cfg = AugmentationConfig(resize=256, crop_size=224)
    out = augment(image, cfg, 'test', seed=1)
    assert out.shape == (3, 224, 224)
    assert torch.equal(out, augment(image, cfg, 'test', seed=2))
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_train_mode_reproducible_for_seed():
    image = Image.fromarray(np.random.default_rng(1).integers(0, 255, (256, 256, 3), dtype=np.uint8))
    cfg = AugmentationConfig(resize=256, crop_size=224)
    assert torch.equal(augment(image, cfg, 'train', seed=5), augment(image, cfg, 'train', seed=5))


def test_train_crop_uses_seeded_offset(gradient_image):
    cfg = AugmentationConfig(resize=48, crop_size=32, brightness=0.0, contrast=0.0, saturation=0.0)
    for seed in range(5):
        top, left = _crop_offset(gradient_image.size, cfg, seed)
        out = augment(gradient_image, cfg, 'train', seed=seed)
        assert float(out[0, 0, 0]) * 255 == pytest.approx(left * 3, abs=1.5)
        assert float(out[1, 0, 0]) * 255 == pytest.approx(top * 5, abs=1.5)


def test_jitter_changes_pixels_not_crop(gradient_image):
    plain = AugmentationConfig(resize=48, crop_size=32, brightness=0.0, contrast=0.0, saturation=0.0)
    jittered = AugmentationConfig(resize=48, crop_size=32, brightness=0.5, contrast=0.0, saturation=0.0)
    assert _crop_offset(gradient_image.size, plain, 3) == _crop_offset(gradient_image.size, jittered, 3)
    assert not torch.equal(augment(gradient_image, plain, 'train', 3), augment(gradient_image, jittered, 'train', 3))


def test_small_images_are_upscaled():
    image = Image.fromarray(np.zeros((20, 30, 3), dtype=np.uint8))
    out = augment(image, AugmentationConfig(resize=32, crop_size=32), 'train', seed=0)
    assert out.shape == (3, 32, 32)


def test_unknown_mode_rejected(gradient_image):
    with pytest.raises(ValueError):
        augment(gradient_image, AugmentationConfig(resize=48, crop_size=32), 'val')
