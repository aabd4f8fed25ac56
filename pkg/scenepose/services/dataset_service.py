from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from scenepose.config.settings import AugmentationConfig
from scenepose.core.pose import InvalidQuaternionError, Pose
from scenepose.services.augmentation_service import augment

logger = logging.getLogger(__name__)

SPLITS = ('train', 'test')
MANIFEST_HEADER = "# dataset_id scene split image x y z qw qx qy qz"


class ManifestParseError(ValueError):
    """Custom exception for malformed manifest rows"""
    pass


class DataError(ValueError):
    """Custom exception for rows with invalid pose values"""
    pass


@dataclass(frozen=True)
class LabeledSample:
    image_path: str
    pose: Pose
    scene_id: int
    dataset_id: str
    split: str
    scene_name: str = ''


@dataclass
class PoseDataset:
    """Samples plus the dense scene-id table (index = scene id, value = (dataset_id, scene name))."""
    samples: List[LabeledSample] = field(default_factory=list)
    scenes: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def num_scenes(self) -> int:
        return len(self.scenes)

    def split(self, name: str) -> "PoseDataset":
        return PoseDataset([s for s in self.samples if s.split == name], list(self.scenes))

    def __len__(self) -> int:
        return len(self.samples)


def _parse_row(tokens: List[str], line_number: int, base_dir: Path):
    if len(tokens) != 11:
        raise ManifestParseError(f"Line {line_number}: expected 11 fields, got {len(tokens)}")
    dataset_id, scene_name, split, image = tokens[:4]
    if split not in SPLITS:
        raise ManifestParseError(f"Line {line_number}: split must be one of {SPLITS}, got '{split}'")
    try:
        values = [float(t) for t in tokens[4:]]
    except ValueError:
        raise ManifestParseError(f"Line {line_number}: pose fields must be numeric")
    if not np.all(np.isfinite(values)):
        raise DataError(f"Line {line_number}: pose contains non-finite values")
    try:
        pose = Pose.from_arrays(values[:3], values[3:])
    except InvalidQuaternionError as e:
        raise DataError(f"Line {line_number}: {e}")
    image_path = Path(image)
    if not image_path.is_absolute():
        image_path = base_dir / image_path
    return dataset_id, scene_name, split, str(image_path), pose


def load_dataset(manifest_path: Union[str, Path]) -> PoseDataset:
    """Read a whitespace-separated manifest; scene ids are dense in order of first appearance."""
    manifest_path = Path(manifest_path)
    try:
        text = manifest_path.read_text()
    except OSError as e:
        logger.error(f"Error reading manifest {manifest_path}: {e}")
        raise
    dataset = PoseDataset()
    scene_ids: Dict[Tuple[str, str], int] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith('#'):
            continue
        dataset_id, scene_name, split, image_path, pose = _parse_row(tokens, line_number, manifest_path.parent)
        key = (dataset_id, scene_name)
        if key not in scene_ids:
            scene_ids[key] = len(dataset.scenes)
            dataset.scenes.append(key)
        dataset.samples.append(LabeledSample(image_path, pose, scene_ids[key], dataset_id, split, scene_name))
    logger.info(f"Loaded {len(dataset.samples)} samples over {dataset.num_scenes} scenes from {manifest_path}")
    return dataset


def merge_datasets(datasets: Sequence[PoseDataset]) -> PoseDataset:
    """Concatenate datasets; a (dataset_id, scene) pair keeps one id, assigned in order of first appearance."""
    if not datasets:
        raise ValueError("merge_datasets needs at least one dataset")
    merged = PoseDataset()
    scene_ids: Dict[Tuple[str, str], int] = {}
    for dataset in datasets:
        remap = {}
        for old_id, key in enumerate(dataset.scenes):
            if key not in scene_ids:
                scene_ids[key] = len(merged.scenes)
                merged.scenes.append(key)
            remap[old_id] = scene_ids[key]
        merged.samples.extend(replace(s, scene_id=remap[s.scene_id]) for s in dataset.samples)
    logger.info(f"Merged {len(datasets)} datasets into {merged.num_scenes} scenes, {len(merged)} samples")
    return merged


def load_manifests(manifests: Union[str, Path, Sequence[Union[str, Path]]]) -> PoseDataset:
    """Load one manifest, or several (a list or a comma-separated string) merged into one scene table."""
    if isinstance(manifests, (str, Path)):
        manifests = [m.strip() for m in str(manifests).split(',') if m.strip()]
    if not manifests:
        raise ValueError("No manifest given")
    datasets = [load_dataset(m) for m in manifests]
    return datasets[0] if len(datasets) == 1 else merge_datasets(datasets)


def format_manifest_row(sample: LabeledSample, image_path: Optional[str] = None) -> str:
    q = sample.pose.orientation
    values = list(sample.pose.position) + [q.w, q.x, q.y, q.z]
    return ' '.join([sample.dataset_id, sample.scene_name, sample.split, image_path or sample.image_path]
                    + [repr(float(v)) for v in values])


def write_manifest(path: Union[str, Path], samples: Sequence[LabeledSample],
                   relative_to: Optional[Path] = None) -> None:
    lines = [MANIFEST_HEADER]
    for sample in samples:
        image_path = sample.image_path
        if relative_to is not None:
            image_path = Path(image_path).relative_to(relative_to).as_posix()
        lines.append(format_manifest_row(sample, image_path))
    Path(path).write_text('\n'.join(lines) + '\n')


def write_scene_map(path: Union[str, Path], dataset: PoseDataset) -> None:
    """Sidecar text file: scene_id dataset_id scene_name."""
    lines = ["# scene_id dataset_id scene"]
    lines += [f"{scene_id} {dataset_id} {name}" for scene_id, (dataset_id, name) in enumerate(dataset.scenes)]
    Path(path).write_text('\n'.join(lines) + '\n')


def load_image(path: str) -> Image.Image:
    with Image.open(path) as image:
        return image.convert('RGB')


class PoseImageDataset(Dataset):
    """Torch view over labeled samples: augmented image, pose, scene and centroid labels."""

    def __init__(self, samples: Sequence[LabeledSample], labels: Optional[Sequence] = None,
                 augmentation: Optional[AugmentationConfig] = None, mode: str = 'train'):
        self.samples = list(samples)
        self.labels = list(labels) if labels is not None else None
        self.augmentation = augmentation or AugmentationConfig()
        self.mode = mode
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        sample = self.samples[index]
        seed = self.augmentation.seed + self.epoch * len(self.samples) + index
        image = augment(load_image(sample.image_path), self.augmentation, self.mode, seed)
        item = {
            'image': image,
            'position': torch.tensor(sample.pose.position, dtype=torch.float32),
            'orientation': torch.tensor(sample.pose.orientation.as_array(), dtype=torch.float32),
            'scene': torch.tensor(sample.scene_id, dtype=torch.long),
            'index': torch.tensor(index, dtype=torch.long),
        }
        if self.labels is not None:
            item['position_label'] = torch.tensor(self.labels[index].position_label, dtype=torch.long)
            item['orientation_label'] = torch.tensor(self.labels[index].orientation_label, dtype=torch.long)
        return item
