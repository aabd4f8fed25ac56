from dataclasses import dataclass
from typing import List, Sequence, Tuple
import logging
import math

import numpy as np

logger = logging.getLogger(__name__)


class InvalidQuaternionError(ValueError):
    """Custom exception for quaternions that cannot be normalized"""
    pass


class EmptyInputError(ValueError):
    """Custom exception for statistics requested over no samples"""
    pass


@dataclass(frozen=True)
class Quaternion:
    """Rotation quaternion, scalar first (w, x, y, z)."""
    w: float
    x: float
    y: float
    z: float

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Quaternion":
        if len(values) != 4:
            raise InvalidQuaternionError(f"Expected 4 quaternion components, got {len(values)}")
        w, x, y, z = (float(v) for v in values)
        return cls(w, x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.w, -self.x, -self.y, -self.z)


@dataclass(frozen=True)
class Pose:
    """Camera position in meters and orientation, stored normalized and canonical."""
    position: Tuple[float, float, float]
    orientation: Quaternion

    def __post_init__(self):
        position = tuple(float(v) for v in self.position)
        if len(position) != 3:
            raise ValueError(f"Position must have 3 components, got {len(position)}")
        object.__setattr__(self, 'position', position)
        object.__setattr__(self, 'orientation', canonicalize(normalize(self.orientation)))

    @classmethod
    def from_arrays(cls, position: Sequence[float], orientation: Sequence[float]) -> "Pose":
        return cls(tuple(position), Quaternion.from_array(orientation))

    def position_array(self) -> np.ndarray:
        return np.asarray(self.position, dtype=np.float64)


@dataclass(frozen=True)
class PoseError:
    position_err: float
    orientation_err: float

    def __post_init__(self):
        if self.position_err < 0 or self.orientation_err < 0:
            raise ValueError("Pose errors must be non-negative")
        if self.orientation_err > 180.0:
            raise ValueError(f"Orientation error {self.orientation_err} exceeds 180 degrees")


def normalize(q: Quaternion) -> Quaternion:
    n = q.norm()
    if not n > 0 or not math.isfinite(n):
        raise InvalidQuaternionError(f"Cannot normalize quaternion with norm {n}: {q}")
    return Quaternion(q.w / n, q.x / n, q.y / n, q.z / n)


def canonicalize(q: Quaternion) -> Quaternion:
    """Pick the representative of {q, -q} with w >= 0 (first nonzero of x, y, z on ties)."""
    for component in (q.w, q.x, q.y, q.z):
        if component > 0:
            return q
        if component < 0:
            return -q
    raise InvalidQuaternionError("Cannot canonicalize the zero quaternion")


def normalize_array(q: np.ndarray) -> np.ndarray:
    """Row-wise normalization of an (n, 4) array."""
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(~(norms > 0)) or not np.all(np.isfinite(norms)):
        raise InvalidQuaternionError("Quaternion array contains zero-norm or non-finite rows")
    return q / norms


def canonicalize_array(q: np.ndarray) -> np.ndarray:
    """Row-wise canonical sign for an (n, 4) array."""
    q = np.array(q, dtype=np.float64, copy=True)
    flat = q.reshape(-1, 4)
    nonzero = flat != 0
    if not np.all(nonzero.any(axis=1)):
        raise InvalidQuaternionError("Cannot canonicalize the zero quaternion")
    first = nonzero.argmax(axis=1)
    signs = np.sign(flat[np.arange(flat.shape[0]), first])
    flat *= signs[:, None]
    return flat.reshape(q.shape)


def position_error(x_est: Sequence[float], x_gt: Sequence[float]) -> float:
    diff = np.asarray(x_gt, dtype=np.float64) - np.asarray(x_est, dtype=np.float64)
    return float(np.linalg.norm(diff))


def orientation_error_deg(q_est: Quaternion, q_gt: Quaternion) -> float:
    """Rotation angle between two orientations in degrees, 2*arccos(|<a, b>|) on unit quaternions.

    Evaluated as 4*atan2(|a - s b|, |a + s b|) with s the sign of <a, b>: exact 0 for q vs q and q vs -q,
    and no loss of precision near 0 degrees.
    """
    a = normalize(q_est).as_array()
    b = normalize(q_gt).as_array()
    if float(np.dot(a, b)) < 0:
        b = -b
    return math.degrees(4.0 * math.atan2(float(np.linalg.norm(a - b)), float(np.linalg.norm(a + b))))


def pose_error(estimate: Pose, ground_truth: Pose) -> PoseError:
    return PoseError(
        position_err=position_error(estimate.position, ground_truth.position),
        orientation_err=orientation_error_deg(estimate.orientation, ground_truth.orientation),
    )


def _lower_median(values: List[float]) -> float:
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def median_errors(samples: Sequence[PoseError]) -> PoseError:
    """Componentwise lower median of a list of pose errors."""
    if not samples:
        raise EmptyInputError("Cannot take the median of an empty list of pose errors")
    return PoseError(
        position_err=_lower_median([s.position_err for s in samples]),
        orientation_err=_lower_median([s.orientation_err for s in samples]),
    )
