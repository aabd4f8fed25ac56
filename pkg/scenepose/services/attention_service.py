"""Encoder heatmaps, per-scene decoder maps and the ranking of scene queries by their own attention mass."""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union
import logging

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from PIL import Image

from scenepose.models.pose_regressor import AttentionMaps, MultiScenePoseRegressor

logger = logging.getLogger(__name__)


@dataclass
class AttentionResult:
    """All tensors are detached and on the CPU; B = batch, N = scenes."""
    encoder_position: torch.Tensor     # [B, H, W] selected encoder layer, upsampled to the input
    encoder_orientation: torch.Tensor  # [B, H, W]
    decoder: torch.Tensor              # [B, N, H_x, W_x] raw cross-attention of each scene query
    decoder_mass: torch.Tensor         # [B, N] attention above the uniform level, in [0, 1)
    ranking: torch.Tensor              # [B, N] scene ids, highest mass first
    scene_log_probs: torch.Tensor      # [B, N]
    layer: int
    maps: AttentionMaps


def normalize_heatmap(heatmap: torch.Tensor) -> torch.Tensor:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    low, high = heatmap.min(), heatmap.max()
    if high <= low:
        return torch.zeros_like(heatmap)
    return (heatmap - low) / (high - low)


def upsample_encoder_map(attention: torch.Tensor, grid, size) -> torch.Tensor:
    """Mean attention each token receives, reshaped to its grid and bilinearly resized to `size`."""
    received = attention.mean(dim=1)
    heatmap = received.reshape(attention.shape[0], 1, grid[0], grid[1])
    return F.interpolate(heatmap, size=size, mode='bilinear', align_corners=False)[:, 0]


def attention_mass(cross: torch.Tensor) -> torch.Tensor:
    """Sum of each query's map above the uniform level 1/T, for [..., T] rows that sum to one.

    A plain sum is 1 for every query; this is 0 for a uniform map and approaches 1 as the map collapses on one token.
    """
    uniform = 1.0 / cross.shape[-1]
    return (cross - uniform).clamp(min=0.0).sum(dim=-1)


def rank_scenes(mass: torch.Tensor) -> torch.Tensor:
    """Descending attention mass; ties keep the lower scene id first."""
    order = np.argsort(-mass.numpy(), axis=-1, kind='stable')
    return torch.from_numpy(order)


def _select_layer(weights: List[torch.Tensor], layer: int) -> torch.Tensor:
    if not -len(weights) <= layer < len(weights):
        raise ValueError(f"Attention layer {layer} out of range for a {len(weights)}-layer model")
    return weights[layer]


def extract_attention(model: MultiScenePoseRegressor, images: torch.Tensor, layer: int = -1) -> AttentionResult:
    """Encoder heatmaps and per-scene position-decoder maps of one layer (negative indices count from the last).

    Scenes are ranked on their query's own cross-attention; the scene posterior does not enter the ranking.
    A model without layers yields zero encoder maps and uniform decoder maps.
    """
    model.eval()
    with torch.no_grad():
        output = model(images, return_attention=True)
    maps = output.attention
    size = tuple(images.shape[-2:])
    batch, num_scenes = output.scene_log_probs.shape
    if maps.position_encoder:
        encoder_position = upsample_encoder_map(_select_layer(maps.position_encoder, layer), maps.position_grid, size)
        encoder_orientation = upsample_encoder_map(_select_layer(maps.orientation_encoder, layer),
                                                   maps.orientation_grid, size)
        cross = _select_layer(maps.position_decoder_cross, layer)
    else:
        encoder_position = encoder_orientation = torch.zeros(batch, *size)
        h, w = maps.position_grid
        cross = torch.full((batch, num_scenes, h * w), 1.0 / (h * w))

    decoder = cross.reshape(batch, num_scenes, *maps.position_grid)
    mass = attention_mass(cross).cpu()
    return AttentionResult(
        encoder_position=encoder_position.cpu(),
        encoder_orientation=encoder_orientation.cpu(),
        decoder=decoder.cpu(),
        decoder_mass=mass,
        ranking=rank_scenes(mass),
        scene_log_probs=output.scene_log_probs.cpu(),
        layer=layer,
        maps=maps,
    )


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return (np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _save_map(heatmap: torch.Tensor, stem: Path) -> List[Path]:
    png, txt = stem.with_suffix('.png'), stem.with_suffix('.txt')
    Image.fromarray(_to_uint8(normalize_heatmap(heatmap).numpy())).save(png)
    np.savetxt(txt, heatmap.numpy(), fmt='%.9g')
    return [png, txt]


def overlay_heatmap(image: torch.Tensor, heatmap: torch.Tensor, alpha: float = 0.5) -> Image.Image:
    """Blend a red heatmap over a [3, H, W] image in [0, 1]."""
    rgb = image.permute(1, 2, 0).cpu().numpy()
    heat = normalize_heatmap(heatmap).numpy()[..., None]
    red = np.zeros_like(rgb)
    red[..., 0] = 1.0
    blended = (1.0 - alpha * heat) * rgb + alpha * heat * red
    return Image.fromarray(_to_uint8(blended))


def export_attention(model: MultiScenePoseRegressor, images: torch.Tensor, out_dir: Union[str, Path],
                     names: Optional[Sequence[str]] = None, layer: int = -1) -> Dict[str, List[int]]:
    """Write per-image encoder maps (both branches), one decoder map per scene, overlays and ranking.yaml.

    Returns the ranking per image name.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = list(names) if names is not None else [f"image{i:04d}" for i in range(images.shape[0])]
    if len(names) != images.shape[0]:
        raise ValueError(f"Got {len(names)} names for {images.shape[0]} images")
    result = extract_attention(model, images, layer)

    ranking_report = {}
    written = 0
    for b, name in enumerate(names):
        written += len(_save_map(result.encoder_position[b], out_dir / f"{name}_encoder_position"))
        written += len(_save_map(result.encoder_orientation[b], out_dir / f"{name}_encoder_orientation"))
        for scene in range(result.decoder.shape[1]):
            written += len(_save_map(result.decoder[b, scene], out_dir / f"{name}_decoder_scene{scene:03d}"))
        overlay_heatmap(images[b], result.encoder_position[b]).save(out_dir / f"{name}_overlay_position.png")
        overlay_heatmap(images[b], result.encoder_orientation[b]).save(out_dir / f"{name}_overlay_orientation.png")
        written += 2
        ranking_report[name] = {
            'ranking': [int(s) for s in result.ranking[b]],
            'mass': [float(m) for m in result.decoder_mass[b]],
            'layer': layer,
        }
    (out_dir / 'ranking.yaml').write_text(yaml.safe_dump(ranking_report, sort_keys=False))
    logger.info(f"Exported attention for {len(names)} images ({written} files) to {out_dir}")
    return {name: entry['ranking'] for name, entry in ranking_report.items()}
