"""Multi-scene objective: learned-weight pose loss plus scene and centroid NLL terms."""
from dataclasses import dataclass
from typing import Dict, NamedTuple

import torch
import torch.nn as nn

from scenepose.core.pose import InvalidQuaternionError


class LossError(ValueError):
    """Custom exception for invalid loss targets"""
    pass


class SupervisionTarget(NamedTuple):
    position: torch.Tensor           # [B, 3]   x_0
    orientation: torch.Tensor        # [B, 4]   q_0, unit and canonical
    scene: torch.Tensor              # [B]      s_0
    position_label: torch.Tensor     # [B]      c_{x,0}
    orientation_label: torch.Tensor  # [B]      c_{q,0}


@dataclass
class LossBreakdown:
    total: torch.Tensor
    pose: torch.Tensor
    position: torch.Tensor
    orientation: torch.Tensor
    scene_nll: torch.Tensor
    position_centroid_nll: torch.Tensor
    orientation_centroid_nll: torch.Tensor
    s_x: torch.Tensor    # balance terms as used for `total`, not the live parameters
    s_q: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {name: float(value.detach()) for name, value in vars(self).items()}


def position_loss(x: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
    """||x_0 - x||_2 per sample."""
    return torch.linalg.vector_norm(x0 - x, dim=-1)


def orientation_loss(q: torch.Tensor, q0: torch.Tensor) -> torch.Tensor:
    """||q_0 - q / ||q|| ||_2 per sample."""
    norm = torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    if torch.any(norm == 0):
        raise InvalidQuaternionError("Predicted quaternion has zero norm")
    return torch.linalg.vector_norm(q0 - q / norm, dim=-1)


def pose_loss(l_x: torch.Tensor, l_q: torch.Tensor, s_x: torch.Tensor, s_q: torch.Tensor) -> torch.Tensor:
    return l_x * torch.exp(-s_x) + s_x + l_q * torch.exp(-s_q) + s_q


def nll(log_probs: torch.Tensor, true_index: torch.Tensor) -> torch.Tensor:
    """-log_probs[true_index] per sample."""
    true_index = torch.as_tensor(true_index, dtype=torch.long, device=log_probs.device)
    if log_probs.dim() == 1:
        log_probs, true_index = log_probs.unsqueeze(0), true_index.reshape(1)
    if torch.any(true_index < 0) or torch.any(true_index >= log_probs.shape[-1]):
        raise LossError(f"Class index out of range [0, {log_probs.shape[-1]}): {true_index.tolist()}")
    return -log_probs.gather(-1, true_index.unsqueeze(-1)).squeeze(-1)


class MultiSceneLoss(nn.Module):
    """Owns the learned balance terms s_x, s_q; batch reduction is the mean."""

    def __init__(self, init_s_x: float = 0.0, init_s_q: float = -3.0):
        super().__init__()
        self.s_x = nn.Parameter(torch.tensor(float(init_s_x)))
        self.s_q = nn.Parameter(torch.tensor(float(init_s_q)))

    def forward(self, output, target: SupervisionTarget) -> LossBreakdown:
        l_x = position_loss(output.position, target.position).mean()
        l_q = orientation_loss(output.orientation, target.orientation).mean()
        pose = pose_loss(l_x, l_q, self.s_x, self.s_q)
        scene_nll = nll(output.scene_log_probs, target.scene).mean()
        cx_nll = nll(output.position_centroid_log_probs, target.position_label).mean()
        cq_nll = nll(output.orientation_centroid_log_probs, target.orientation_label).mean()
        return LossBreakdown(
            total=pose + scene_nll + cx_nll + cq_nll,
            pose=pose,
            position=l_x,
            orientation=l_q,
            scene_nll=scene_nll,
            position_centroid_nll=cx_nll,
            orientation_centroid_nll=cq_nll,
            s_x=self.s_x.detach().clone(),
            s_q=self.s_q.detach().clone(),
        )
