"""MODNet CLI — Point clouds, kd-tree queries and multi-scale patch preprocessing."""

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from modnet_cli.error_reporter import GeometryError, IsolatedPointError

DEFAULT_RADII = (0.03, 0.04, 0.05)
DEFAULT_N_PATCH = 400
LEAF_SIZE = 16
UNIT_TOL = 1e-9
SKEW_TOL = 1e-9

# Candidate sets from the tree are padded by this relative margin and then
# filtered with exact numpy arithmetic.
_QUERY_SLACK = 1e-9


@dataclass
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise GeometryError(
                    f"normals count {len(self.normals)} != points count {len(self.points)}"
                )
            lengths = np.linalg.norm(self.normals, axis=1)
            if len(lengths) and np.max(np.abs(lengths - 1.0)) > UNIT_TOL:
                raise GeometryError("normals must have unit length")

    def __len__(self):
        return len(self.points)

    @cached_property
    def bbox_diag(self) -> float:
        if len(self.points) == 0:
            return 0.0
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))

    def transformed(self, rotation, translation=(0.0, 0.0, 0.0)) -> "PointCloud":
        """Apply x -> R x + t to every point (normals are rotated)."""
        rotation = np.asarray(rotation, dtype=np.float64)
        points = self.points @ rotation.T + np.asarray(translation, dtype=np.float64)
        normals = None if self.normals is None else self.normals @ rotation.T
        return PointCloud(points, normals)


class SpatialIndex:
    """Immutable kd-tree over a snapshot of a point cloud."""

    def __init__(self, points: np.ndarray, leaf_size: int = LEAF_SIZE):
        self.points = np.array(points, dtype=np.float64, copy=True)
        self.points.setflags(write=False)
        self.leaf_size = leaf_size
        self._tree = cKDTree(self.points, leafsize=leaf_size)

    def __len__(self):
        return len(self.points)

    def nearest(self, queries, k: int = 1) -> np.ndarray:
        """[n_queries, k] indices of the k nearest points for each query row."""
        if k < 1 or k > len(self.points):
            raise GeometryError(f"k={k} outside [1, {len(self.points)}]")
        _, idx = self._tree.query(np.asarray(queries, dtype=np.float64).reshape(-1, 3), k=k)
        return np.asarray(idx, dtype=np.int64).reshape(-1, k)

    def _exact_distances(self, idx, center):
        diff = self.points[idx] - center
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def build_index(cloud: PointCloud, leaf_size: int = LEAF_SIZE) -> SpatialIndex:
    if len(cloud) == 0:
        raise GeometryError("empty point cloud")
    if leaf_size < 1:
        raise GeometryError("leaf size must be positive")
    return SpatialIndex(cloud.points, leaf_size)


def radius_query(index: SpatialIndex, center, r: float) -> List[int]:
    """Indices with distance strictly below r, ascending."""
    if not r > 0:
        raise GeometryError(f"radius must be positive, got {r}")
    center = np.asarray(center, dtype=np.float64)
    cand = index._tree.query_ball_point(center, r * (1.0 + _QUERY_SLACK))
    if not cand:
        return []
    cand = np.sort(np.asarray(cand, dtype=np.int64))
    keep = index._exact_distances(cand, center) < r
    return cand[keep].tolist()


def knn_query(index: SpatialIndex, center, k: int) -> List[int]:
    """The k nearest indices, ordered by distance then index."""
    n = len(index)
    if k < 1 or k > n:
        raise GeometryError(f"k={k} outside [1, {n}]")
    center = np.asarray(center, dtype=np.float64)
    dist, _ = index._tree.query(center, k=k)
    kth = float(np.max(np.atleast_1d(dist)))
    cand = index._tree.query_ball_point(center, kth * (1.0 + _QUERY_SLACK) + 1e-12)
    cand = np.asarray(cand, dtype=np.int64)
    d = index._exact_distances(cand, center)
    order = np.lexsort((cand, d))
    return cand[order[:k]].tolist()


def _skew_sign(coords: np.ndarray) -> float:
    """Sign of the third moment of one aligned coordinate; the farthest point decides when it vanishes."""
    skew = float(np.sum(coords ** 3))
    if abs(skew) > SKEW_TOL * float(np.sum(np.abs(coords) ** 3)):
        return 1.0 if skew > 0 else -1.0
    far = int(np.argmax(np.abs(coords)))
    return 1.0 if coords[far] >= 0 else -1.0


def pca_rotation(points) -> Tuple[np.ndarray, bool]:
    """Rotation sending the principal axes (descending variance) to y, x, z.

    Returns (R, degenerate). Aligned coordinates are R @ v. Row signs depend
    only on the points: each aligned coordinate gets a nonnegative third
    moment, then the z row is flipped if needed so det(R) = +1. Coincident or
    collinear input gives the identity with degenerate=True.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(np.unique(points, axis=0)) < 2:
        return np.eye(3), True
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 1e-12 * max(float(evals.sum()), np.finfo(float).tiny):
        return np.eye(3), True

    rotation = np.stack([evecs[:, 1], evecs[:, 2], evecs[:, 0]])
    aligned = centered @ rotation.T
    for k in range(3):
        rotation[k] *= _skew_sign(aligned[:, k])
    if np.linalg.det(rotation) < 0:
        rotation[2] *= -1.0
    return rotation, False


def resample_fixed(points, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, int]:
    """Downsample to exactly n points, or pad with origin points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    count = len(points)
    if count == n:
        return points.copy(), 0
    if count > n:
        keep = np.sort(rng.choice(count, size=n, replace=False))
        return points[keep], 0
    pad = n - count
    return np.concatenate([points, np.zeros((pad, 3))]), pad


def patch_rng(seed: int, i: int) -> np.random.Generator:
    """Per-point generator, independent of worker scheduling."""
    return np.random.default_rng([int(seed), int(i)])


@dataclass
class MultiScalePatch:
    scale_points: List[np.ndarray]
    pad_counts: Tuple[int, ...]
    center: np.ndarray
    scale: float
    rotation: np.ndarray
    radii_frac: Tuple[float, ...]
    index: int = -1
    degenerate: bool = False

    def to_model_frame(self, dp) -> np.ndarray:
        """Map a displacement from the aligned frame back: center + scale * R^T dp."""
        return self.center + self.scale * (np.asarray(dp, dtype=np.float64) @ self.rotation)

    def to_patch_frame(self, points) -> np.ndarray:
        return ((np.asarray(points, dtype=np.float64) - self.center) / self.scale) @ self.rotation.T


@dataclass
class GroundTruthPatch:
    gt_points: np.ndarray
    gt_normals: np.ndarray
    dobb: float = field(default=-1.0)

    def __post_init__(self):
        self.gt_points = np.asarray(self.gt_points, dtype=np.float64).reshape(-1, 3)
        self.gt_normals = np.asarray(self.gt_normals, dtype=np.float64).reshape(-1, 3)
        if len(self.gt_points) != len(self.gt_normals):
            raise GeometryError("ground truth points and normals differ in count")
        if self.dobb < 0:
            self.dobb = float(np.linalg.norm(np.ptp(self.gt_points, axis=0))) if len(self.gt_points) else 0.0

    @property
    def m(self) -> int:
        return len(self.gt_points)


def _check_radii(radii_frac):
    radii = tuple(float(r) for r in radii_frac)
    if not radii or any(r <= 0 for r in radii) or any(b < a for a, b in zip(radii, radii[1:])):
        raise GeometryError(f"radii must be positive and ascending, got {radii}")
    return radii


def extract_multiscale_patch(
    cloud: PointCloud,
    index: SpatialIndex,
    i: int,
    radii_frac: Sequence[float] = DEFAULT_RADII,
    n_patch: int = DEFAULT_N_PATCH,
    rng: Optional[np.random.Generator] = None,
) -> MultiScalePatch:
    radii = _check_radii(radii_frac)
    if n_patch < 1:
        raise GeometryError("n_patch must be at least 1")
    if not 0 <= i < len(cloud):
        raise GeometryError(f"point index {i} out of range [0, {len(cloud)})")
    if rng is None:
        rng = patch_rng(0, i)

    diag = cloud.bbox_diag
    if diag <= 0:
        raise IsolatedPointError(f"isolated point {i}")
    center = cloud.points[i].copy()
    r_max = radii[-1] * diag
    neighborhoods = [radius_query(index, center, frac * diag) for frac in radii]
    if len(neighborhoods[-1]) < 2:
        raise IsolatedPointError(f"isolated point {i}")

    largest = (cloud.points[neighborhoods[-1]] - center) / r_max
    rotation, degenerate = pca_rotation(largest)

    scale_points, pads = [], []
    for nb in neighborhoods:
        local = ((cloud.points[nb] - center) / r_max) @ rotation.T
        fixed, pad = resample_fixed(local, n_patch, rng)
        scale_points.append(fixed)
        pads.append(pad)
    return MultiScalePatch(
        scale_points=scale_points,
        pad_counts=tuple(pads),
        center=center,
        scale=r_max,
        rotation=rotation,
        radii_frac=radii,
        index=i,
        degenerate=degenerate,
    )


def extract_gt_patch(
    clean: PointCloud,
    center,
    patch: MultiScalePatch,
    r_frac: float = 0.05,
    m_max: int = 500,
    rng: Optional[np.random.Generator] = None,
    index: Optional[SpatialIndex] = None,
) -> GroundTruthPatch:
    """Clean support around a noisy point, in that point's patch frame."""
    if clean.normals is None:
        raise GeometryError("ground truth cloud has no normals")
    if not r_frac > 0:
        raise GeometryError(f"r_frac must be positive, got {r_frac}")
    if m_max < 1:
        raise GeometryError("m_max must be at least 1")
    if index is None:
        index = build_index(clean)
    if rng is None:
        rng = patch_rng(0, patch.index)

    nb = radius_query(index, center, r_frac * clean.bbox_diag) if clean.bbox_diag > 0 else []
    if not nb:
        raise GeometryError("no ground truth support")
    nb = np.asarray(nb)
    if len(nb) > m_max:
        nb = nb[np.sort(rng.choice(len(nb), size=m_max, replace=False))]
    points = patch.to_patch_frame(clean.points[nb])
    normals = clean.normals[nb] @ patch.rotation.T
    return GroundTruthPatch(points, normals)


# ── XYZ[N] files ─────────────────────────────────────────

def read_xyz(path) -> PointCloud:
    path = Path(path)
    try:
        data = np.loadtxt(path, comments="#", ndmin=2, dtype=np.float64)
    except (OSError, ValueError) as e:
        raise GeometryError(f"cannot read {path}: {e}") from e
    if data.size == 0:
        return PointCloud(np.zeros((0, 3)))
    if data.shape[1] not in (3, 6):
        raise GeometryError(f"{path}: expected 3 or 6 columns, found {data.shape[1]}")
    if data.shape[1] == 3:
        return PointCloud(data)
    normals = data[:, 3:]
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    if np.any(lengths == 0):
        raise GeometryError(f"{path}: zero-length normal")
    # Files written at lower precision are renormalized on read.
    return PointCloud(data[:, :3], normals / lengths)


def write_xyz(path, cloud: PointCloud, with_normals: Optional[bool] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if with_normals is None:
        with_normals = cloud.normals is not None
    if with_normals and cloud.normals is None:
        raise GeometryError("cloud has no normals to write")
    data = np.hstack([cloud.points, cloud.normals]) if with_normals else cloud.points
    np.savetxt(path, data, fmt="%.17g")
