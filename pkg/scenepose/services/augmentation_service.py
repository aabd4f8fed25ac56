from typing import Optional
import logging

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image

from scenepose.config.settings import AugmentationConfig

logger = logging.getLogger(__name__)

MODES = ('train', 'test')


def _jitter_factor(rng: np.random.Generator, magnitude: float) -> float:
    if magnitude <= 0:
        return 1.0
    return float(rng.uniform(max(0.0, 1.0 - magnitude), 1.0 + magnitude))


def augment(image: Image.Image, cfg: AugmentationConfig, mode: str = 'test', seed: Optional[int] = None) -> torch.Tensor:
    """Resize the short edge, crop and (train only) jitter; returns a [3, crop, crop] tensor in [0, 1].

    train: random crop and brightness/contrast/saturation jitter drawn from a generator seeded with `seed`
    test:  center crop only, independent of the seed
    """
    if mode not in MODES:
        raise ValueError(f"Augmentation mode must be one of {MODES}, got '{mode}'")
    if min(image.size) < cfg.resize:
        logger.debug(f"Upscaling {image.size} image to short edge {cfg.resize}")
    resized = TF.resize(image, cfg.resize, interpolation=TF.InterpolationMode.BILINEAR, antialias=True)
    width, height = resized.size

    if mode == 'test':
        return TF.to_tensor(TF.center_crop(resized, [cfg.crop_size, cfg.crop_size]))

    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    top = int(rng.integers(0, height - cfg.crop_size + 1))
    left = int(rng.integers(0, width - cfg.crop_size + 1))
    cropped = TF.crop(resized, top, left, cfg.crop_size, cfg.crop_size)
    cropped = TF.adjust_brightness(cropped, _jitter_factor(rng, cfg.brightness))
    cropped = TF.adjust_contrast(cropped, _jitter_factor(rng, cfg.contrast))
    cropped = TF.adjust_saturation(cropped, _jitter_factor(rng, cfg.saturation))
    return TF.to_tensor(cropped)
