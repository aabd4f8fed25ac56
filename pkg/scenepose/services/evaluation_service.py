from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union
import logging

import torch
import yaml
from torch.utils.data import DataLoader

from scenepose.config.settings import AugmentationConfig
from scenepose.core.pose import Pose, PoseError, median_errors, pose_error
from scenepose.models.pose_regressor import MultiScenePoseRegressor
from scenepose.services.clustering_service import CentroidSet, assign_labels
from scenepose.services.dataset_service import LabeledSample, PoseImageDataset

logger = logging.getLogger(__name__)


class EvaluationError(ValueError):
    """Custom exception for evaluations with nothing to evaluate"""
    pass


@dataclass
class SceneReport:
    scene_id: int
    name: str
    count: int
    position_err: float
    orientation_err: float


@dataclass
class EvalReport:
    scenes: List[SceneReport]
    average: PoseError
    scene_accuracy: float
    position_centroid_accuracy: float
    orientation_centroid_accuracy: float
    num_samples: int
    split: str = 'test'
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'scenes': [
                {'scene_id': s.scene_id, 'name': s.name, 'count': s.count,
                 'position_err_m': s.position_err, 'orientation_err_deg': s.orientation_err}
                for s in self.scenes
            ],
            'average': {'position_err_m': self.average.position_err,
                        'orientation_err_deg': self.average.orientation_err},
            'accuracy': {'scene': self.scene_accuracy,
                         'position_centroid': self.position_centroid_accuracy,
                         'orientation_centroid': self.orientation_centroid_accuracy,
                         'samples': self.num_samples,
                         'split': self.split},
            'warnings': list(self.warnings),
        }

    def write_yaml(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        logger.info(f"Wrote evaluation report to {path}")
        return path


@dataclass
class Prediction:
    """Inference result for one sample, next to its ground truth."""
    sample: LabeledSample
    pose: Pose
    scene: int
    position_centroid: int
    orientation_centroid: int


def predict(model: MultiScenePoseRegressor, samples: Sequence[LabeledSample],
            augmentation: Optional[AugmentationConfig] = None, batch_size: int = 8,
            device: str = 'cpu', use_residuals: bool = True) -> List[Prediction]:
    """Inference-mode forward with argmax scene and centroid selection; use_residuals=False gives centroids only."""
    dataset = PoseImageDataset(samples, augmentation=augmentation, mode='test')
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    model.to(device)
    model.eval()
    predictions = []
    with torch.no_grad():
        for batch in loader:
            output = model(batch['image'].to(device), use_residuals=use_residuals)
            orientations = output.orientation_normalized.cpu().double().numpy()
            positions = output.position.cpu().double().numpy()
            for row, index in enumerate(batch['index'].tolist()):
                predictions.append(Prediction(
                    sample=samples[index],
                    pose=Pose.from_arrays(positions[row], orientations[row]),
                    scene=int(output.selected_scene[row]),
                    position_centroid=int(output.selected_position_centroid[row]),
                    orientation_centroid=int(output.selected_orientation_centroid[row]),
                ))
    return predictions


def summarize(predictions: Sequence[Prediction], centroid_sets: Dict[int, CentroidSet],
              scene_names: Sequence[str], split: str = 'test') -> EvalReport:
    """Per-scene medians, their macro-average and classification accuracies.

    A centroid prediction counts as correct only when the scene was also predicted correctly.
    """
    if not predictions:
        raise EvaluationError(f"No samples to evaluate in split '{split}'")
    labels = assign_labels([p.sample for p in predictions], centroid_sets)
    errors: Dict[int, List[PoseError]] = {}
    scene_hits = position_hits = orientation_hits = 0
    for prediction, label in zip(predictions, labels):
        truth = prediction.sample
        errors.setdefault(truth.scene_id, []).append(pose_error(prediction.pose, truth.pose))
        if prediction.scene == truth.scene_id:
            scene_hits += 1
            position_hits += prediction.position_centroid == label.position_label
            orientation_hits += prediction.orientation_centroid == label.orientation_label

    report_warnings = []
    scenes = []
    for scene_id, name in enumerate(scene_names):
        if scene_id not in errors:
            message = f"Scene {scene_id} ({name}) has no '{split}' samples and is excluded"
            logger.warning(message)
            report_warnings.append(message)
            continue
        median = median_errors(errors[scene_id])
        scenes.append(SceneReport(scene_id, name, len(errors[scene_id]),
                                  median.position_err, median.orientation_err))

    average = PoseError(
        position_err=sum(s.position_err for s in scenes) / len(scenes),
        orientation_err=sum(s.orientation_err for s in scenes) / len(scenes),
    )
    total = len(predictions)
    return EvalReport(
        scenes=scenes,
        average=average,
        scene_accuracy=scene_hits / total,
        position_centroid_accuracy=position_hits / total,
        orientation_centroid_accuracy=orientation_hits / total,
        num_samples=total,
        split=split,
        warnings=report_warnings,
    )


class EvaluationService:
    def __init__(self, augmentation: Optional[AugmentationConfig] = None, batch_size: int = 8, device: str = 'cpu',
                 use_residuals: bool = True):
        self.augmentation = augmentation or AugmentationConfig()
        self.batch_size = batch_size
        self.device = device
        self.use_residuals = use_residuals

    def evaluate(self, model: MultiScenePoseRegressor, samples: Sequence[LabeledSample],
                 centroid_sets: Dict[int, CentroidSet], scene_names: Optional[Sequence[str]] = None,
                 split: str = 'test') -> EvalReport:
        try:
            split_samples = [s for s in samples if s.split == split]
            if scene_names is None:
                scene_names = [str(i) for i in range(model.config.num_scenes)]
            logger.info(f">>> START eval: {len(split_samples)} '{split}' samples")
            predictions = predict(model, split_samples, self.augmentation, self.batch_size, self.device,
                                  self.use_residuals)
            report = summarize(predictions, centroid_sets, scene_names, split)
            logger.info(f"<<< END eval: scene accuracy {report.scene_accuracy:.3f}, average "
                        f"{report.average.position_err:.3f} m / {report.average.orientation_err:.2f} deg")
            return report
        except Exception as e:
            logger.error(f"Evaluation failed: {str(e)}")
            raise
