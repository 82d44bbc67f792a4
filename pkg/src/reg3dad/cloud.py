"""Point clouds, rigid transforms and the basic geometric operations on them.

All coordinates are millimetres, stored as float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spatial import SpatialIndex

FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered point set with optional unit normals and binary labels.

    Attributes:
        points: (N, 3) float64 coordinates.
        normals: (N, 3) unit vectors or None.
        labels: (N,) uint8 with 0 = normal, 1 = anomalous, or None.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError(f"{len(nrm)} normals for {len(pts)} points")
            norms = np.linalg.norm(nrm, axis=1)
            if len(nrm) and np.max(np.abs(norms - 1.0)) > 1e-6:
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (len(pts),):
                raise ValueError(f"{lab.shape[0] if lab.ndim else 0} labels for {len(pts)} points")
            if lab.size and not np.all((lab == 0) | (lab == 1)):
                raise ValueError("labels must be 0 or 1")
            object.__setattr__(self, "labels", lab.astype(np.uint8))
        for arr in (self.points, self.normals, self.labels):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self):
        return len(self.points)

    def select(self, indices) -> "PointCloud":
        """Subset of the cloud, in the order given by `indices`."""
        idx = np.asarray(indices)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.labels is None else self.labels[idx],
        )

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, normals, self.labels)

    def with_labels(self, labels) -> "PointCloud":
        return PointCloud(self.points, self.normals, labels)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """p -> rotation @ p + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("transform entries must be finite")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-6 or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: x -> self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        """Rotation angle in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class AABB:
    min: np.ndarray
    max: np.ndarray

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.max - self.min))


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals @ t.rotation.T
    if normals is not None:
        # re-normalize to absorb rounding so the unit-length invariant holds
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(t.apply(cloud.points), normals, cloud.labels)


def bounding_box(cloud: PointCloud) -> AABB:
    if len(cloud) == 0:
        raise ValueError("bounding box of an empty cloud")
    return AABB(cloud.points.min(axis=0), cloud.points.max(axis=0))


def voxel_downsample(cloud: PointCloud, voxel: float):
    """Replace each occupied voxel by the centroid of its members.

    Returns:
        (downsampled cloud, index_map) where ``index_map[i]`` is the output row
        representing input point ``i``. Output rows are ordered by voxel key.
        Labels are reduced by max (a voxel with any anomalous member is anomalous).
    """
    if not voxel > 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    if len(cloud) == 0:
        return cloud, np.zeros(0, dtype=np.int64)
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, index_map, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    index_map = index_map.reshape(-1)
    m = len(counts)
    pts = np.zeros((m, 3))
    np.add.at(pts, index_map, cloud.points)
    pts /= counts[:, None]
    normals = None
    if cloud.normals is not None:
        acc = np.zeros((m, 3))
        np.add.at(acc, index_map, cloud.normals)
        lengths = np.linalg.norm(acc, axis=1)
        normals = np.where(lengths[:, None] > 1e-12, acc / np.maximum(lengths, 1e-300)[:, None], FALLBACK_NORMAL)
    labels = None
    if cloud.labels is not None:
        labels = np.zeros(m, dtype=np.uint8)
        np.maximum.at(labels, index_map, cloud.labels)
    return PointCloud(pts, normals, labels), index_map


def random_subsample(cloud: PointCloud, ratio: int, seed=0):
    """Keep ceil(N / ratio) points chosen uniformly without replacement.

    Returns (subsampled cloud, kept_indices) with kept_indices increasing.
    """
    ratio = int(ratio)
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    n = len(cloud)
    if ratio == 1:
        kept = np.arange(n)
    else:
        keep = -(-n // ratio)
        rng = np.random.default_rng(seed)
        kept = np.sort(rng.choice(n, size=keep, replace=False))
    return cloud.select(kept), kept


def estimate_normals(cloud: PointCloud, k: int = 16, orientation_ref=(0.0, 0.0, 0.0), return_flags: bool = False):
    """PCA normals over k-nearest neighbourhoods, oriented toward `orientation_ref`.

    Neighbourhoods whose covariance has rank < 2 get the fallback normal (0, 0, 1)
    and are reported in the degeneracy flags when ``return_flags`` is set.
    """
    n = len(cloud)
    if k < 3:
        raise ValueError(f"k must be >= 3, got {k}")
    if n < k:
        raise ValueError(f"cloud has {n} points, fewer than k={k}")
    pts = cloud.points
    index = SpatialIndex(pts)
    nbr, _ = index.knn_batch(pts, k)
    neigh = pts[nbr]  # (n, k, 3)
    centred = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = (evals[:, 1] <= 1e-12 * scale) | (evals[:, 2] <= 1e-24)
    normals[degenerate] = FALLBACK_NORMAL
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    ref = np.asarray(orientation_ref, dtype=np.float64)
    flip = np.einsum("ij,ij->i", ref - pts, normals) < 0
    flip &= ~degenerate
    normals[flip] *= -1.0
    out = cloud.with_normals(normals)
    if return_flags:
        return out, degenerate
    return out


def mean_spacing(points: np.ndarray) -> float:
    """Mean distance from each point to its nearest other point."""
    if len(points) < 2:
        return 0.0
    index = SpatialIndex(points)
    _, dist = index.knn_batch(points, 2)
    return float(dist[:, 1].mean())
