"""Multi-scene coarse-to-fine pose regressor.

Backbone activation maps are encoded by a position and an orientation transformer,
decoded against one learned query per scene, and the selected scene's embeddings
pick a position/orientation centroid and regress the residual added to it.
"""
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Tuple
import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from scenepose.config.settings import ConfigError, ModelConfig
from scenepose.models.backbone import (ActivationMaps, build_backbone,
                                       reference_backbone_parameter_count)
from scenepose.models.transformer import SequencePreparer, TransformerDecoder, TransformerEncoder

logger = logging.getLogger(__name__)


class SelectionError(ValueError):
    """Custom exception for out-of-range forced scene or centroid indices"""
    pass


@dataclass
class AttentionMaps:
    """Attention weights collected during one forward pass (head-averaged)."""
    position_encoder: List[torch.Tensor]
    orientation_encoder: List[torch.Tensor]
    position_decoder_self: List[torch.Tensor]
    orientation_decoder_self: List[torch.Tensor]
    position_decoder_cross: List[torch.Tensor]
    orientation_decoder_cross: List[torch.Tensor]
    position_grid: Tuple[int, int]
    orientation_grid: Tuple[int, int]


@dataclass
class ModelOutput:
    scene_log_probs: torch.Tensor               # [B, N]
    position_embeddings: torch.Tensor           # [B, N, C_d]  {X_i}
    orientation_embeddings: torch.Tensor        # [B, N, C_d]  {Q_i}
    fused_embeddings: torch.Tensor              # [B, N, 2 C_d]
    selected_scene: torch.Tensor                # [B]
    position_centroid_log_probs: torch.Tensor   # [B, K_x]
    orientation_centroid_log_probs: torch.Tensor  # [B, K_q]
    selected_position_centroid: torch.Tensor    # [B]
    selected_orientation_centroid: torch.Tensor  # [B]
    delta_position: torch.Tensor                # [B, 3]
    delta_orientation: torch.Tensor             # [B, 4]
    position: torch.Tensor                      # [B, 3]  c^x + dx
    orientation: torch.Tensor                   # [B, 4]  c^q + dq, unnormalized
    attention: Optional[AttentionMaps] = field(default=None)

    @property
    def orientation_normalized(self) -> torch.Tensor:
        return F.normalize(self.orientation, dim=-1)


def select_index(log_probs: torch.Tensor, forced_index: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Forced index when given (teacher forcing), otherwise argmax with lowest-index ties."""
    if forced_index is not None:
        forced_index = torch.as_tensor(forced_index, dtype=torch.long, device=log_probs.device).reshape(-1)
        if forced_index.numel() == 1 and log_probs.shape[0] > 1:
            forced_index = forced_index.expand(log_probs.shape[0])
        if forced_index.shape[0] != log_probs.shape[0]:
            raise SelectionError(f"Got {forced_index.shape[0]} forced indices for a batch of {log_probs.shape[0]}")
        if torch.any(forced_index < 0) or torch.any(forced_index >= log_probs.shape[-1]):
            raise SelectionError(f"Forced index out of range [0, {log_probs.shape[-1]}): {forced_index.tolist()}")
        return forced_index
    return torch.argmax(log_probs, dim=-1)


class CentroidClassifier(nn.Module):
    """One affine layer per scene (or one shared) mapping an embedding to centroid logits."""

    def __init__(self, num_scenes: int, dim: int, num_clusters: int, shared: bool = False):
        super().__init__()
        self.num_scenes = num_scenes
        self.shared = shared
        tables = 1 if shared else num_scenes
        self.weight = nn.Parameter(torch.empty(tables, num_clusters, dim))
        self.bias = nn.Parameter(torch.zeros(tables, num_clusters))
        nn.init.xavier_uniform_(self.weight.view(tables * num_clusters, dim))

    def forward(self, embedding: torch.Tensor, scene: torch.Tensor) -> torch.Tensor:
        if torch.any(scene < 0) or torch.any(scene >= self.num_scenes):
            raise SelectionError(f"No centroid classifier for scene(s) {scene.tolist()}")
        index = torch.zeros_like(scene) if self.shared else scene
        logits = torch.einsum('bkc,bc->bk', self.weight[index], embedding) + self.bias[index]
        return F.log_softmax(logits, dim=-1)


class ResidualHead(nn.Module):
    """MLP with a single gelu hidden layer regressing a residual vector."""

    def __init__(self, dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class MultiScenePoseRegressor(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        d = config.token_dim
        spec = config.backbone
        self.backbone = build_backbone(spec)
        self.position_sequence = SequencePreparer(spec.position_tap.channels, d,
                                                  spec.position_tap.height, spec.position_tap.width)
        self.orientation_sequence = SequencePreparer(spec.orientation_tap.channels, d,
                                                     spec.orientation_tap.height, spec.orientation_tap.width)
        stack = (d, config.num_layers, config.num_heads, config.mlp_hidden_dim, config.dropout)
        self.position_encoder = TransformerEncoder(*stack)
        self.orientation_encoder = TransformerEncoder(*stack)
        self.position_decoder = TransformerDecoder(*stack)
        self.orientation_decoder = TransformerDecoder(*stack)
        self.position_queries = nn.Parameter(torch.empty(config.num_scenes, d))
        self.orientation_queries = nn.Parameter(torch.empty(config.num_scenes, d))
        nn.init.normal_(self.position_queries, std=0.02)
        nn.init.normal_(self.orientation_queries, std=0.02)
        self.scene_classifier = nn.Linear(2 * d, 1)
        self.position_centroid_classifier = CentroidClassifier(
            config.num_scenes, d, config.num_position_clusters, config.shared_centroid_heads)
        self.orientation_centroid_classifier = CentroidClassifier(
            config.num_scenes, d, config.num_orientation_clusters, config.shared_centroid_heads)
        self.position_residual = ResidualHead(d, config.head_hidden_dim, 3)
        self.orientation_residual = ResidualHead(d, config.head_hidden_dim, 4)
        self.register_buffer('position_centroids',
                             torch.zeros(config.num_scenes, config.num_position_clusters, 3))
        orientation_centroids = torch.zeros(config.num_scenes, config.num_orientation_clusters, 4)
        orientation_centroids[..., 0] = 1.0
        self.register_buffer('orientation_centroids', orientation_centroids)

    def set_centroids(self, centroid_sets: Mapping) -> None:
        """Load per-scene centroids; scene ids must be 0..N-1 and K values must match the config."""
        expected = set(range(self.config.num_scenes))
        if set(centroid_sets) != expected:
            raise ConfigError(f"Centroid sets cover scenes {sorted(centroid_sets)}, model has {sorted(expected)}")
        for scene_id, centroid_set in centroid_sets.items():
            if centroid_set.num_position_clusters != self.config.num_position_clusters or \
                    centroid_set.num_orientation_clusters != self.config.num_orientation_clusters:
                raise ConfigError(
                    f"Scene {scene_id} has K_x={centroid_set.num_position_clusters}, "
                    f"K_q={centroid_set.num_orientation_clusters}; model expects "
                    f"K_x={self.config.num_position_clusters}, K_q={self.config.num_orientation_clusters}")
            self.position_centroids[scene_id] = torch.as_tensor(
                centroid_set.position_centroids, dtype=self.position_centroids.dtype)
            self.orientation_centroids[scene_id] = torch.as_tensor(
                centroid_set.orientation_centroids, dtype=self.orientation_centroids.dtype)

    def backbone_forward(self, images: torch.Tensor) -> ActivationMaps:
        return self.backbone(images)

    def encode(self, maps: ActivationMaps, need_weights: bool = True):
        position_sequence = self.position_sequence(maps.position)
        orientation_sequence = self.orientation_sequence(maps.orientation)
        position_memory, position_attention = self.position_encoder(position_sequence, need_weights)
        orientation_memory, orientation_attention = self.orientation_encoder(orientation_sequence, need_weights)
        return (position_sequence, position_memory, position_attention,
                orientation_sequence, orientation_memory, orientation_attention)

    def fuse_and_classify_scene(self, position_embeddings: torch.Tensor,
                                orientation_embeddings: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        fused = torch.cat([position_embeddings, orientation_embeddings], dim=-1)
        logits = self.scene_classifier(fused).squeeze(-1)
        return fused, F.log_softmax(logits, dim=-1)

    def classify_centroids(self, position_selected: torch.Tensor, orientation_selected: torch.Tensor,
                           scene: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return (self.position_centroid_classifier(position_selected, scene),
                self.orientation_centroid_classifier(orientation_selected, scene))

    def regress_residuals(self, position_selected: torch.Tensor,
                          orientation_selected: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.position_residual(position_selected), self.orientation_residual(orientation_selected)

    def forward(self, images: torch.Tensor,
                scene_index: Optional[torch.Tensor] = None,
                position_label: Optional[torch.Tensor] = None,
                orientation_label: Optional[torch.Tensor] = None,
                use_residuals: bool = True,
                return_attention: bool = False) -> ModelOutput:
        maps = self.backbone_forward(images)
        (position_sequence, position_memory, position_enc_attention,
         orientation_sequence, orientation_memory, orientation_enc_attention) = self.encode(maps, return_attention)

        n = self.config.num_scenes
        position_embeddings, position_self, position_cross = self.position_decoder(
            self.position_queries, position_memory, position_sequence.pos, n, return_attention)
        orientation_embeddings, orientation_self, orientation_cross = self.orientation_decoder(
            self.orientation_queries, orientation_memory, orientation_sequence.pos, n, return_attention)

        fused, scene_log_probs = self.fuse_and_classify_scene(position_embeddings, orientation_embeddings)
        scene = select_index(scene_log_probs, scene_index)
        batch = torch.arange(images.shape[0], device=images.device)
        position_selected = position_embeddings[batch, scene]
        orientation_selected = orientation_embeddings[batch, scene]

        cx_log_probs, cq_log_probs = self.classify_centroids(position_selected, orientation_selected, scene)
        kx = select_index(cx_log_probs, position_label)
        kq = select_index(cq_log_probs, orientation_label)
        position_centroid = self.position_centroids[scene, kx]
        orientation_centroid = self.orientation_centroids[scene, kq]

        if use_residuals:
            delta_position, delta_orientation = self.regress_residuals(position_selected, orientation_selected)
        else:
            delta_position = position_centroid.new_zeros(position_centroid.shape)
            delta_orientation = orientation_centroid.new_zeros(orientation_centroid.shape)

        attention = None
        if return_attention:
            attention = AttentionMaps(
                position_encoder=position_enc_attention,
                orientation_encoder=orientation_enc_attention,
                position_decoder_self=position_self,
                orientation_decoder_self=orientation_self,
                position_decoder_cross=position_cross,
                orientation_decoder_cross=orientation_cross,
                position_grid=(position_sequence.height, position_sequence.width),
                orientation_grid=(orientation_sequence.height, orientation_sequence.width),
            )

        return ModelOutput(
            scene_log_probs=scene_log_probs,
            position_embeddings=position_embeddings,
            orientation_embeddings=orientation_embeddings,
            fused_embeddings=fused,
            selected_scene=scene,
            position_centroid_log_probs=cx_log_probs,
            orientation_centroid_log_probs=cq_log_probs,
            selected_position_centroid=kx,
            selected_orientation_centroid=kq,
            delta_position=delta_position,
            delta_orientation=delta_orientation,
            position=position_centroid + delta_position,
            orientation=orientation_centroid + delta_orientation,
            attention=attention,
        )


def _linear(fan_in: int, fan_out: int) -> int:
    return fan_in * fan_out + fan_out


def _attention(d: int) -> int:
    return 4 * _linear(d, d)


def count_parameters(config: ModelConfig, backbone_parameters: Optional[int] = None) -> int:
    """Closed-form trainable parameter count of MultiScenePoseRegressor for a config.

    The reference backbone is counted analytically; other backbones need their count passed in.
    """
    d, h, n, L = config.token_dim, config.mlp_hidden_dim, config.num_scenes, config.num_layers
    spec = config.backbone
    if backbone_parameters is None:
        if spec.name != 'reference':
            raise ConfigError(f"Pass backbone_parameters for the '{spec.name}' backbone")
        backbone_parameters = reference_backbone_parameter_count(spec)
    layer_norm = 2 * d
    mlp = _linear(d, h) + _linear(h, d)
    encoder = L * (_attention(d) + mlp + 2 * layer_norm) + layer_norm
    decoder = L * (2 * _attention(d) + mlp + 3 * layer_norm) + layer_norm
    sequences = 0
    for tap in (spec.position_tap, spec.orientation_tap):
        sequences += _linear(tap.channels, d) + (tap.height + tap.width) * (d // 2)
    tables = 1 if config.shared_centroid_heads else n
    centroid_heads = tables * (config.num_position_clusters + config.num_orientation_clusters) * (d + 1)
    residual_heads = (_linear(d, config.head_hidden_dim) + _linear(config.head_hidden_dim, 3)
                      + _linear(d, config.head_hidden_dim) + _linear(config.head_hidden_dim, 4))
    return (backbone_parameters + sequences + 2 * encoder + 2 * decoder + 2 * n * d
            + _linear(2 * d, 1) + centroid_heads + residual_heads)


def trainable_parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
