from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Union
import hashlib
import logging

import numpy as np
from scipy.cluster.vq import vq

from scenepose.core.pose import canonicalize_array, normalize_array

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 300
FILE_HEADER = "# scene_id K_x K_q seed / K_x position rows (x y z) / K_q orientation rows (w x y z)"


class InsufficientPointsError(ValueError):
    """Custom exception for clustering requests with fewer points than clusters"""
    pass


class MissingCentroidsError(ValueError):
    """Custom exception for samples whose scene has no centroid set"""
    pass


class CentroidFileError(ValueError):
    """Custom exception for malformed centroid files"""
    pass


class KMeansResult(NamedTuple):
    centroids: np.ndarray
    assignments: np.ndarray
    cost: float
    cost_history: List[float]


@dataclass(frozen=True)
class CentroidSet:
    """Per-scene position (K_x x 3) and orientation (K_q x 4) centroids, stored as float32."""
    scene_id: int
    position_centroids: np.ndarray
    orientation_centroids: np.ndarray
    seed: int = 0

    def __post_init__(self):
        positions = np.asarray(self.position_centroids, dtype=np.float32).reshape(-1, 3)
        orientations = np.asarray(self.orientation_centroids, dtype=np.float32).reshape(-1, 4)
        if positions.shape[0] < 1 or orientations.shape[0] < 1:
            raise ValueError(f"Scene {self.scene_id} needs at least one centroid per branch")
        positions.setflags(write=False)
        orientations.setflags(write=False)
        object.__setattr__(self, 'position_centroids', positions)
        object.__setattr__(self, 'orientation_centroids', orientations)

    @property
    def num_position_clusters(self) -> int:
        return self.position_centroids.shape[0]

    @property
    def num_orientation_clusters(self) -> int:
        return self.orientation_centroids.shape[0]


@dataclass(frozen=True)
class CentroidLabels:
    sample_id: int
    position_label: int
    orientation_label: int


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum('nkd,nkd->nk', diff, diff)


def _nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Closest centroid per row; ties go to the lowest index."""
    codes, _ = vq(points, centroids, check_finite=False)
    return codes.astype(np.int64)


def _cost(points: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> float:
    diff = points - centroids[assignments]
    return float(np.einsum('nd,nd->', diff, diff))


def _kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _squared_distances(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every remaining point coincides with a chosen centroid
            remaining = [i for i in range(n) if i not in chosen]
            chosen.append(int(rng.choice(remaining)))
        else:
            chosen.append(int(rng.choice(n, p=closest / total)))
        closest = np.minimum(closest, _squared_distances(points, points[chosen[-1:]])[:, 0])
    return points[chosen].copy()


def _repair_empty_clusters(points: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> np.ndarray:
    """Move each empty centroid onto the point farthest from its own centroid."""
    k = centroids.shape[0]
    for cluster in range(k):
        if np.any(assignments == cluster):
            continue
        counts = np.bincount(assignments, minlength=k)
        distances = np.einsum('nd,nd->n', points - centroids[assignments], points - centroids[assignments])
        # a point that is the sole member of its cluster cannot be moved without emptying another
        distances[counts[assignments] <= 1] = -1.0
        farthest = int(np.argmax(distances))
        logger.warning(f"Reseeding empty cluster {cluster} to point {farthest}")
        centroids[cluster] = points[farthest]
        assignments[farthest] = cluster
    return assignments


def lloyd(points: np.ndarray, init_centroids: np.ndarray, max_iterations: int = MAX_ITERATIONS) -> KMeansResult:
    """Lloyd iterations from explicit initial centroids until assignments stop changing.

    The cost after every centroid update is kept in `cost_history`; empty clusters are reseeded each pass.
    """
    points = np.asarray(points, dtype=np.float64)
    centroids = np.array(init_centroids, dtype=np.float64, copy=True)
    k = centroids.shape[0]
    assignments = _nearest(points, centroids)
    assignments = _repair_empty_clusters(points, centroids, assignments)
    history = []
    for iteration in range(max_iterations):
        for cluster in range(k):
            centroids[cluster] = points[assignments == cluster].mean(axis=0)
        history.append(_cost(points, centroids, assignments))
        updated = _nearest(points, centroids)
        updated = _repair_empty_clusters(points, centroids, updated)
        if np.array_equal(updated, assignments):
            break
        assignments = updated
    else:
        logger.warning(f"k-means stopped at the {max_iterations} iteration cap before converging")
    return KMeansResult(centroids, assignments, history[-1], history)


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iterations: int = MAX_ITERATIONS) -> KMeansResult:
    """k-means++ seeded Lloyd clustering; deterministic for a fixed seed."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if k < 1:
        raise InsufficientPointsError(f"k must be >= 1, got {k}")
    if points.shape[0] < k:
        raise InsufficientPointsError(f"Cannot build {k} clusters from {points.shape[0]} points")
    if not np.all(np.isfinite(points)):
        raise ValueError("k-means input contains non-finite values")
    rng = np.random.default_rng(seed)
    return lloyd(points, _kmeans_plus_plus(points, k, rng), max_iterations)


def kmeans_restarts(points: np.ndarray, k: int, max_iterations: int = MAX_ITERATIONS) -> KMeansResult:
    """Run Lloyd from every k-subset of distinct points and keep the cheapest result."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.shape[0] < k:
        raise InsufficientPointsError(f"Cannot build {k} clusters from {points.shape[0]} points")
    best = None
    for subset in combinations(range(points.shape[0]), k):
        seeds = points[list(subset)]
        if np.unique(seeds, axis=0).shape[0] < k:
            continue
        result = lloyd(points, seeds, max_iterations)
        if best is None or result.cost < best.cost:
            best = result
    if best is None:
        # fewer than k distinct points; any seeding reaches cost 0
        best = lloyd(points, points[:k], max_iterations)
    return best


def build_centroid_sets(samples: Sequence, num_position_clusters: int, num_orientation_clusters: int,
                        seed: int = 0) -> Dict[int, CentroidSet]:
    """Cluster positions in R^3 and canonical orientations in R^4 for each scene."""
    by_scene: Dict[int, List] = {}
    for sample in samples:
        by_scene.setdefault(sample.scene_id, []).append(sample)

    centroid_sets = {}
    for scene_id in sorted(by_scene):
        scene_samples = by_scene[scene_id]
        needed = max(num_position_clusters, num_orientation_clusters)
        if len(scene_samples) < needed:
            raise InsufficientPointsError(
                f"Scene {scene_id} has {len(scene_samples)} samples but {needed} clusters were requested")
        positions = np.array([s.pose.position for s in scene_samples], dtype=np.float64)
        orientations = canonicalize_array(np.array([s.pose.orientation.as_array() for s in scene_samples]))

        position_result = kmeans(positions, num_position_clusters, seed)
        orientation_result = kmeans(orientations, num_orientation_clusters, seed)
        orientation_centroids = canonicalize_array(normalize_array(orientation_result.centroids))

        centroid_sets[scene_id] = CentroidSet(
            scene_id=scene_id,
            position_centroids=position_result.centroids,
            orientation_centroids=orientation_centroids,
            seed=seed,
        )
        logger.info(f"Scene {scene_id}: {len(scene_samples)} samples, position cost {position_result.cost:.4f}, "
                    f"orientation cost {orientation_result.cost:.4f}")
    return centroid_sets


def nearest_centroid(point: np.ndarray, centroids: np.ndarray) -> int:
    """Index of the closest centroid; ties go to the lowest index."""
    point = np.asarray(point, dtype=np.float64)[None, :]
    return int(_nearest(point, np.asarray(centroids, dtype=np.float64))[0])


def assign_labels(samples: Sequence, centroid_sets: Dict[int, CentroidSet]) -> List[CentroidLabels]:
    labels = []
    for sample_id, sample in enumerate(samples):
        centroid_set = centroid_sets.get(sample.scene_id)
        if centroid_set is None:
            raise MissingCentroidsError(f"No centroids for scene {sample.scene_id} (sample {sample_id})")
        orientation = canonicalize_array(sample.pose.orientation.as_array()[None, :])[0]
        labels.append(CentroidLabels(
            sample_id=sample_id,
            position_label=nearest_centroid(sample.pose.position_array(), centroid_set.position_centroids),
            orientation_label=nearest_centroid(orientation, centroid_set.orientation_centroids),
        ))
    return labels


def _format_row(tag: str, values: np.ndarray) -> str:
    return tag + ' ' + ' '.join('%.9g' % float(v) for v in values)


def write_centroid_file(path: Union[str, Path], centroid_sets: Dict[int, CentroidSet]) -> str:
    """Write centroid sets as plain text and return the file's SHA-256 digest."""
    lines = [FILE_HEADER]
    for scene_id in sorted(centroid_sets):
        centroid_set = centroid_sets[scene_id]
        lines.append(f"scene {scene_id} {centroid_set.num_position_clusters} "
                     f"{centroid_set.num_orientation_clusters} {centroid_set.seed}")
        lines.extend(_format_row('x', row) for row in centroid_set.position_centroids)
        lines.extend(_format_row('q', row) for row in centroid_set.orientation_centroids)
    text = '\n'.join(lines) + '\n'
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    logger.info(f"Wrote {len(centroid_sets)} centroid sets to {path}")
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def centroid_file_digest(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _parse_row(tokens: List[str], tag: str, width: int, line_number: int) -> np.ndarray:
    if len(tokens) != width + 1 or tokens[0] != tag:
        raise CentroidFileError(f"Line {line_number}: expected '{tag}' row with {width} values")
    try:
        return np.array([np.float32(t) for t in tokens[1:]], dtype=np.float32)
    except ValueError:
        raise CentroidFileError(f"Line {line_number}: non-numeric centroid value")


def read_centroid_file(path: Union[str, Path]) -> Dict[int, CentroidSet]:
    lines = [(i + 1, line.split()) for i, line in enumerate(Path(path).read_text().splitlines())]
    lines = [(n, tokens) for n, tokens in lines if tokens and not tokens[0].startswith('#')]
    centroid_sets: Dict[int, CentroidSet] = {}
    cursor = 0
    while cursor < len(lines):
        line_number, tokens = lines[cursor]
        if len(tokens) != 5 or tokens[0] != 'scene':
            raise CentroidFileError(f"Line {line_number}: expected 'scene <id> <K_x> <K_q> <seed>'")
        try:
            scene_id, kx, kq, seed = (int(t) for t in tokens[1:])
        except ValueError:
            raise CentroidFileError(f"Line {line_number}: non-integer scene header")
        rows = lines[cursor + 1: cursor + 1 + kx + kq]
        if len(rows) != kx + kq:
            raise CentroidFileError(f"Line {line_number}: scene {scene_id} is truncated")
        positions = [_parse_row(t, 'x', 3, n) for n, t in rows[:kx]]
        orientations = [_parse_row(t, 'q', 4, n) for n, t in rows[kx:]]
        if scene_id in centroid_sets:
            raise CentroidFileError(f"Line {line_number}: duplicate scene {scene_id}")
        centroid_sets[scene_id] = CentroidSet(scene_id, np.stack(positions), np.stack(orientations), seed)
        cursor += 1 + kx + kq
    logger.info(f"Read {len(centroid_sets)} centroid sets from {path}")
    return centroid_sets


class ClusteringService:
    """Builds, labels and persists per-scene centroids for the coarse classification stage."""

    def __init__(self, num_position_clusters: int, num_orientation_clusters: int, seed: int = 0):
        self.num_position_clusters = num_position_clusters
        self.num_orientation_clusters = num_orientation_clusters
        self.seed = seed

    def cluster(self, samples: Sequence, out_path: Optional[Union[str, Path]] = None) -> Dict[int, CentroidSet]:
        try:
            logger.info(f"Clustering {len(samples)} samples with K_x={self.num_position_clusters}, "
                        f"K_q={self.num_orientation_clusters}, seed={self.seed}")
            centroid_sets = build_centroid_sets(samples, self.num_position_clusters,
                                                self.num_orientation_clusters, self.seed)
            if out_path is not None:
                write_centroid_file(out_path, centroid_sets)
            return centroid_sets
        except ValueError as e:
            logger.error(f"Clustering failed: {str(e)}")
            raise
