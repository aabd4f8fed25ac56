"""Forward-pass runtime and model size as a function of the number of embedded scenes."""
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Union
import logging
import statistics
import time

import torch

from scenepose.config.settings import BenchConfig, ConfigError, ModelConfig
from scenepose.models.pose_regressor import MultiScenePoseRegressor, count_parameters, trainable_parameter_count

logger = logging.getLogger(__name__)

BENCH_HEADER = 'num_scenes,num_layers,mean_ms,std_ms,parameters,parameter_bytes'


@dataclass(frozen=True)
class BenchRow:
    num_scenes: int
    num_layers: int
    mean_ms: float
    std_ms: float
    parameters: int
    parameter_bytes: int

    def to_csv(self) -> str:
        return (f"{self.num_scenes},{self.num_layers},{self.mean_ms:.4f},{self.std_ms:.4f},"
                f"{self.parameters},{self.parameter_bytes}")


def _synchronize(device: torch.device) -> None:
    if device.type == 'cuda':
        torch.cuda.synchronize()


@torch.no_grad()
def time_forward(model: torch.nn.Module, images: torch.Tensor, cfg: BenchConfig) -> List[float]:
    """Per-trial forward latency in milliseconds after `warmup` untimed passes."""
    device = images.device
    for _ in range(cfg.warmup):
        model(images)
    _synchronize(device)
    timings = []
    for _ in range(cfg.trials):
        start = time.perf_counter()
        model(images)
        _synchronize(device)
        timings.append((time.perf_counter() - start) * 1000.0)
    return timings


def bench_scaling(model_template: ModelConfig, scene_counts: Sequence[int],
                  cfg: Optional[BenchConfig] = None, layer_counts: Optional[Sequence[int]] = None,
                  device: str = 'cpu', seed: int = 0) -> List[BenchRow]:
    """Instantiate an untrained model per (L, N) and time its inference forward pass."""
    cfg = (cfg or BenchConfig()).validate()
    if not scene_counts or min(scene_counts) < 1:
        raise ConfigError(f"Scene counts must be >= 1, got {list(scene_counts)}")
    layer_counts = list(layer_counts) if layer_counts else [model_template.num_layers]
    torch_device = torch.device(device)
    size = model_template.backbone.input_size
    images = torch.randn(cfg.batch_size, 3, size, size, generator=torch.Generator().manual_seed(seed)).to(torch_device)

    rows = []
    for num_layers in layer_counts:
        for num_scenes in scene_counts:
            config = replace(model_template, num_scenes=int(num_scenes), num_layers=int(num_layers)).validate()
            torch.manual_seed(seed)
            model = MultiScenePoseRegressor(config).to(torch_device).eval()
            parameters = trainable_parameter_count(model)
            if config.backbone.name == 'reference' and parameters != count_parameters(config):
                logger.warning(f"Parameter count {parameters} differs from the closed form {count_parameters(config)}")
            timings = time_forward(model, images, cfg)
            row = BenchRow(
                num_scenes=config.num_scenes,
                num_layers=config.num_layers,
                mean_ms=statistics.fmean(timings),
                std_ms=statistics.pstdev(timings),
                parameters=parameters,
                parameter_bytes=sum(p.numel() * p.element_size() for p in model.parameters()),
            )
            logger.info(f"N={row.num_scenes} L={row.num_layers}: {row.mean_ms:.2f} +- {row.std_ms:.2f} ms, "
                        f"{row.parameters} parameters")
            rows.append(row)
            del model
    return rows


def write_bench_table(path: Union[str, Path], rows: Sequence[BenchRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text('\n'.join([BENCH_HEADER] + [row.to_csv() for row in rows]) + '\n')
    logger.info(f"Wrote {len(rows)} benchmark rows to {path}")
    return path
