from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union
import logging
import random

import numpy as np
import torch
from torch.utils.data import DataLoader

from scenepose.config.settings import AugmentationConfig, ConfigError, TrainConfig
from scenepose.models.loss import MultiSceneLoss, SupervisionTarget
from scenepose.models.pose_regressor import MultiScenePoseRegressor
from scenepose.services.checkpoint_service import save_checkpoint
from scenepose.services.clustering_service import CentroidSet, assign_labels
from scenepose.services.dataset_service import LabeledSample, PoseImageDataset

logger = logging.getLogger(__name__)

LOG_COLUMNS = ('epoch', 'step', 'total', 'L_x', 'L_q', 'nll_scene', 'nll_cx', 'nll_cq', 's_x', 's_q', 'lr')
FINAL_CHECKPOINT = 'checkpoint.pt'


@dataclass
class TrainResult:
    checkpoint_path: Path
    history: List[Dict[str, float]] = field(default_factory=list)
    log_path: Optional[Path] = None


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def build_optimizer(model: torch.nn.Module, loss: MultiSceneLoss, cfg: TrainConfig) -> torch.optim.Adam:
    """Adam over the model weights and the learned loss balance terms jointly."""
    return torch.optim.Adam(list(model.parameters()) + list(loss.parameters()),
                            lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def build_scheduler(optimizer: torch.optim.Optimizer, cfg: TrainConfig) -> torch.optim.lr_scheduler.StepLR:
    """Halve the learning rate every lr_halving_interval epochs."""
    return torch.optim.lr_scheduler.StepLR(optimizer, step_size=cfg.lr_halving_interval, gamma=0.5)


def format_log_row(row: Dict[str, float]) -> str:
    return ' '.join(str(int(row[c])) if c in ('epoch', 'step') else '%.6g' % row[c] for c in LOG_COLUMNS)


class TrainingService:
    def __init__(self, cfg: TrainConfig, augmentation: Optional[AugmentationConfig] = None):
        self.cfg = cfg
        self.augmentation = augmentation or AugmentationConfig()

    def _validate(self, model: MultiScenePoseRegressor, samples: Sequence[LabeledSample],
                  centroid_sets: Dict[int, CentroidSet]) -> None:
        self.cfg.validate()
        self.augmentation.validate()
        config = model.config
        if not samples:
            raise ConfigError("Training split is empty")
        if self.augmentation.crop_size != config.backbone.input_size:
            raise ConfigError(f"crop_size {self.augmentation.crop_size} does not match the backbone input size "
                              f"{config.backbone.input_size}")
        if (self.cfg.num_position_clusters, self.cfg.num_orientation_clusters) != \
                (config.num_position_clusters, config.num_orientation_clusters):
            raise ConfigError(f"TrainConfig K_x/K_q ({self.cfg.num_position_clusters}/"
                              f"{self.cfg.num_orientation_clusters}) differ from the model's "
                              f"({config.num_position_clusters}/{config.num_orientation_clusters})")
        scene_ids = {s.scene_id for s in samples}
        if max(scene_ids) >= config.num_scenes:
            raise ConfigError(f"Dataset has scene id {max(scene_ids)} but the model embeds {config.num_scenes} scenes")

    def train(self, model: MultiScenePoseRegressor, samples: Sequence[LabeledSample],
              centroid_sets: Dict[int, CentroidSet], output_dir: Union[str, Path],
              centroid_hash: str = '', loss: Optional[MultiSceneLoss] = None) -> TrainResult:
        """Teacher-forced training; writes train_log.txt, periodic and final checkpoints into output_dir."""
        cfg = self.cfg
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)

        # every config/data mismatch surfaces here, before the first step
        self._validate(model, samples, centroid_sets)
        labels = assign_labels(samples, centroid_sets)
        model.set_centroids(centroid_sets)

        seed_everything(cfg.seed)
        device = torch.device(cfg.device)
        model.to(device)
        loss = loss if loss is not None else MultiSceneLoss(cfg.init_s_x, cfg.init_s_q)
        loss.to(device)
        optimizer = build_optimizer(model, loss, cfg)
        scheduler = build_scheduler(optimizer, cfg)

        dataset = PoseImageDataset(samples, labels, self.augmentation, mode='train')
        loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, num_workers=cfg.num_workers,
                            generator=torch.Generator().manual_seed(cfg.seed))

        log_path = output_dir / 'train_log.txt'
        history: List[Dict[str, float]] = []
        step = 0
        logger.info(f">>> START train: {len(samples)} samples, {model.config.num_scenes} scenes, "
                    f"{cfg.epochs} epochs on {device}")
        with open(log_path, 'w') as log_file:
            log_file.write(' '.join(LOG_COLUMNS) + '\n')
            for epoch in range(cfg.epochs):
                model.train()
                dataset.set_epoch(epoch)
                for batch in loader:
                    lr = optimizer.param_groups[0]['lr']
                    output = model(batch['image'].to(device),
                                   scene_index=batch['scene'].to(device),
                                   position_label=batch['position_label'].to(device),
                                   orientation_label=batch['orientation_label'].to(device))
                    target = SupervisionTarget(
                        position=batch['position'].to(device),
                        orientation=batch['orientation'].to(device),
                        scene=batch['scene'].to(device),
                        position_label=batch['position_label'].to(device),
                        orientation_label=batch['orientation_label'].to(device),
                    )
                    breakdown = loss(output, target)
                    optimizer.zero_grad()
                    breakdown.total.backward()
                    if cfg.grad_clip is not None:
                        torch.nn.utils.clip_grad_norm_(list(model.parameters()) + list(loss.parameters()),
                                                       cfg.grad_clip)
                    optimizer.step()

                    values = breakdown.as_floats()
                    row = {
                        'epoch': epoch, 'step': step, 'total': values['total'],
                        'L_x': values['position'], 'L_q': values['orientation'],
                        'nll_scene': values['scene_nll'], 'nll_cx': values['position_centroid_nll'],
                        'nll_cq': values['orientation_centroid_nll'],
                        's_x': values['s_x'], 's_q': values['s_q'], 'lr': lr,
                    }
                    history.append(row)
                    log_file.write(format_log_row(row) + '\n')
                    logger.debug(format_log_row(row))
                    step += 1
                log_file.flush()
                scheduler.step()
                if history:
                    logger.info(f"Epoch {epoch}: last loss {history[-1]['total']:.4f}, "
                                f"lr {optimizer.param_groups[0]['lr']:.3g}")
                if cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
                    save_checkpoint(output_dir / f"checkpoint_epoch{epoch + 1:04d}.pt", model, loss,
                                    centroid_sets, centroid_hash, epoch + 1, optimizer)

        checkpoint_path = save_checkpoint(output_dir / FINAL_CHECKPOINT, model, loss, centroid_sets,
                                          centroid_hash, cfg.epochs, optimizer)
        logger.info(f"<<< END train: {step} steps, checkpoint {checkpoint_path}")
        return TrainResult(checkpoint_path=checkpoint_path, history=history, log_path=log_path)
