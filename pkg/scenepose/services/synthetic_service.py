"""Procedurally textured multi-scene dataset with exact pose labels."""
from pathlib import Path
from typing import Tuple, Union
import logging
import math

import numpy as np
from PIL import Image

from scenepose.core.pose import Pose
from scenepose.services.dataset_service import (LabeledSample, PoseDataset, load_dataset,
                                                write_manifest, write_scene_map)

logger = logging.getLogger(__name__)

DATASET_ID = 'synthetic'
SCENE_SPACING = 10.0
BOX_EXTENT = (2.0, 2.0, 1.0)
YAW_RANGE_DEG = (-40.0, 40.0)
PITCH_RANGE_DEG = (0.0, 20.0)


def scene_name(scene: int) -> str:
    return f"scene{scene:03d}"


def scene_position_box(scene: int) -> Tuple[np.ndarray, np.ndarray]:
    """Axis-aligned position box of a scene; boxes of different scenes never overlap."""
    low = np.array([SCENE_SPACING * scene, 0.0, 0.0])
    return low, low + np.array(BOX_EXTENT)


def box_diagonal() -> float:
    return float(np.linalg.norm(BOX_EXTENT))


def yaw_pitch_quaternion(yaw_deg: float, pitch_deg: float) -> np.ndarray:
    """Rotation about z by yaw followed by rotation about x by pitch, (w, x, y, z)."""
    cy, sy = math.cos(math.radians(yaw_deg) / 2), math.sin(math.radians(yaw_deg) / 2)
    cp, sp = math.cos(math.radians(pitch_deg) / 2), math.sin(math.radians(pitch_deg) / 2)
    return np.array([cy * cp, cy * sp, sy * sp, sy * cp])


class SceneTexture:
    """Ramps plus sinusoids with scene-specific frequencies, phases and colors."""

    def __init__(self, scene: int, seed: int):
        rng = np.random.default_rng([seed, scene])
        self.frequencies = rng.uniform(0.6, 1.6, size=2)
        self.phases = rng.uniform(0.0, 2 * math.pi, size=2)
        self.colors = rng.uniform(-1.0, 1.0, size=(4, 3))
        self.base = rng.uniform(0.3, 0.7, size=3)

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        wave_u = np.sin(2 * math.pi * self.frequencies[0] * u + self.phases[0])
        wave_v = np.sin(2 * math.pi * self.frequencies[1] * v + self.phases[1])
        layers = np.stack([wave_u, wave_v, (u - 1.0) / 3.0, (v - 1.0) / 3.0], axis=-1)
        rgb = self.base + 0.15 * layers @ self.colors
        return np.clip(rgb, 0.0, 1.0)


def render_view(texture: SceneTexture, local_position: np.ndarray, yaw_deg: float,
                pitch_deg: float, image_size: int) -> np.ndarray:
    """Render the texture seen from a pose: translation shifts, height scales, yaw rotates, pitch tilts."""
    grid = (np.arange(image_size) + 0.5) / image_size * 2.0 - 1.0
    py, px = np.meshgrid(grid, grid, indexing='ij')
    scale = 0.6 + 0.4 * local_position[2]
    yaw, pitch = math.radians(yaw_deg), math.radians(pitch_deg)
    tilt = 1.0 + math.sin(pitch) * py
    u = scale * tilt * (math.cos(yaw) * px - math.sin(yaw) * py) + local_position[0]
    v = scale * tilt * (math.sin(yaw) * px + math.cos(yaw) * py) + local_position[1]
    return (texture(u, v) * 255.0 + 0.5).astype(np.uint8)


def generate_synthetic(num_scenes: int, samples_per_scene: int, image_size: int, seed: int,
                       out_dir: Union[str, Path], test_fraction: float = 0.25) -> PoseDataset:
    """Write images, manifest.txt and scene_map.txt under out_dir and return the loaded dataset.

    Every round(1 / test_fraction)-th sample of a scene is tagged 'test'.
    """
    if num_scenes < 1 or samples_per_scene < 1 or image_size < 1:
        raise ValueError("num_scenes, samples_per_scene and image_size must all be >= 1")
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
    out_dir = Path(out_dir)
    test_stride = round(1.0 / test_fraction) if test_fraction > 0 else 0
    rng = np.random.default_rng(seed)

    samples = []
    for scene in range(num_scenes):
        texture = SceneTexture(scene, seed)
        low, high = scene_position_box(scene)
        image_dir = out_dir / 'images' / scene_name(scene)
        image_dir.mkdir(parents=True, exist_ok=True)
        for i in range(samples_per_scene):
            position = rng.uniform(low, high)
            yaw = float(rng.uniform(*YAW_RANGE_DEG))
            pitch = float(rng.uniform(*PITCH_RANGE_DEG))
            pixels = render_view(texture, position - low, yaw, pitch, image_size)
            image_path = image_dir / f"{i:05d}.png"
            Image.fromarray(pixels).save(image_path, format='PNG')
            split = 'test' if test_stride and i % test_stride == test_stride - 1 else 'train'
            samples.append(LabeledSample(str(image_path), Pose.from_arrays(position, yaw_pitch_quaternion(yaw, pitch)),
                                         scene, DATASET_ID, split, scene_name(scene)))

    manifest_path = out_dir / 'manifest.txt'
    write_manifest(manifest_path, samples, relative_to=out_dir)
    dataset = load_dataset(manifest_path)
    write_scene_map(out_dir / 'scene_map.txt', dataset)
    logger.info(f"Generated {len(samples)} synthetic samples over {num_scenes} scenes in {out_dir}")
    return dataset
