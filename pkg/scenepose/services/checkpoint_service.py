from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union
import logging

import torch

from scenepose.config.settings import ModelConfig
from scenepose.models.loss import MultiSceneLoss
from scenepose.models.pose_regressor import MultiScenePoseRegressor
from scenepose.services.clustering_service import CentroidSet, centroid_file_digest

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Custom exception for unreadable or mismatched checkpoints"""
    pass


@dataclass
class LoadedCheckpoint:
    model: MultiScenePoseRegressor
    loss: MultiSceneLoss
    centroid_sets: Dict[int, CentroidSet]
    centroid_hash: str
    epoch: int
    optimizer_state: Optional[Dict] = None


def _pack_centroids(centroid_sets: Dict[int, CentroidSet]) -> Dict:
    return {
        int(scene_id): {
            'seed': int(cs.seed),
            'position': torch.from_numpy(cs.position_centroids.copy()),
            'orientation': torch.from_numpy(cs.orientation_centroids.copy()),
        }
        for scene_id, cs in centroid_sets.items()
    }


def _unpack_centroids(packed: Dict) -> Dict[int, CentroidSet]:
    return {
        int(scene_id): CentroidSet(int(scene_id), values['position'].cpu().numpy(), values['orientation'].cpu().numpy(),
                                   int(values['seed']))
        for scene_id, values in packed.items()
    }


def save_checkpoint(path: Union[str, Path], model: MultiScenePoseRegressor, loss: MultiSceneLoss,
                    centroid_sets: Dict[int, CentroidSet], centroid_hash: str = '', epoch: int = 0,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    seeds = sorted({int(cs.seed) for cs in centroid_sets.values()})
    container = {
        'format_version': FORMAT_VERSION,
        'model_config': model.config.to_dict(),
        'state_dict': {k: v.detach().cpu() for k, v in model.state_dict().items()},
        'loss_params': {'s_x': float(loss.s_x.detach()), 's_q': float(loss.s_q.detach())},
        'centroids': {
            'seed': seeds[0] if len(seeds) == 1 else seeds,
            'sha256': centroid_hash,
            'sets': _pack_centroids(centroid_sets),
        },
        'epoch': int(epoch),
    }
    if optimizer is not None:
        container['optimizer_state'] = optimizer.state_dict()
    try:
        torch.save(container, path)
    except OSError as e:
        logger.error(f"Error writing checkpoint {path}: {str(e)}")
        raise
    logger.info(f"Saved checkpoint {path} (epoch {epoch})")
    return path


def load_checkpoint(path: Union[str, Path], centroid_path: Optional[Union[str, Path]] = None,
                    device: str = 'cpu') -> LoadedCheckpoint:
    """Rebuild model and loss from a checkpoint; with centroid_path, the file's digest must match."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint {path} does not exist")
    try:
        container = torch.load(path, map_location=device, weights_only=False)
    except Exception as e:
        logger.error(f"Error reading checkpoint {path}: {str(e)}")
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")

    version = container.get('format_version')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format version {version}, expected {FORMAT_VERSION}")
    centroid_hash = container['centroids'].get('sha256', '')
    if centroid_path is not None:
        digest = centroid_file_digest(centroid_path)
        if centroid_hash and digest != centroid_hash:
            raise CheckpointError(f"Centroid file {centroid_path} (sha256 {digest[:12]}) does not match the "
                                  f"centroids the checkpoint was trained with (sha256 {centroid_hash[:12]})")

    model = MultiScenePoseRegressor(ModelConfig.from_dict(container['model_config']))
    try:
        model.load_state_dict(container['state_dict'])
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint {path} does not match its model configuration: {e}")
    model.to(device)
    loss = MultiSceneLoss(container['loss_params']['s_x'], container['loss_params']['s_q']).to(device)
    return LoadedCheckpoint(
        model=model,
        loss=loss,
        centroid_sets=_unpack_centroids(container['centroids']['sets']),
        centroid_hash=centroid_hash,
        epoch=int(container.get('epoch', 0)),
        optimizer_state=container.get('optimizer_state'),
    )
