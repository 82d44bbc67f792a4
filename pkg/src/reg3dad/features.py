"""Per-point descriptors: raw coordinates, FPFH, pooled contextual FPFH, concatenation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .cloud import PointCloud, mean_spacing
from .spatial import SpatialIndex

N_BINS = 11
FPFH_DIM = 3 * N_BINS

RAW = "raw_xyz"
FPFH = "fpfh"
CONTEXTUAL = "contextual"
CONCAT = "concat"
KIND_DIMS = {RAW: 3, FPFH: FPFH_DIM, CONTEXTUAL: FPFH_DIM}


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Descriptor rows bound to points of a source cloud.

    ``params["blocks"]`` lists the column width of each channel block; banks use
    it for per-block normalization.
    """

    matrix: np.ndarray
    point_indices: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)
    degenerate: np.ndarray | None = None

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        idx = np.asarray(self.point_indices, dtype=np.int64)
        if idx.shape != (m.shape[0],):
            raise ValueError("one point index per feature row required")
        if not np.all(np.isfinite(m)):
            raise ValueError("feature rows must be finite")
        if len(np.unique(idx)) != len(idx) or (len(idx) and idx.min() < 0):
            raise ValueError("point indices must be unique and non-negative")
        if self.kind in KIND_DIMS and m.shape[1] != KIND_DIMS[self.kind]:
            raise ValueError(f"{self.kind} features must have {KIND_DIMS[self.kind]} columns")
        params = dict(self.params)
        params.setdefault("blocks", [m.shape[1]])
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "point_indices", idx)
        object.__setattr__(self, "params", params)

    def __len__(self):
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def raw_features(cloud: PointCloud) -> FeatureSet:
    if len(cloud) == 0:
        raise ValueError("raw features of an empty cloud")
    return FeatureSet(cloud.points.copy(), np.arange(len(cloud)), RAW)


def default_feature_radius(points) -> float:
    """Five times the mean nearest-neighbour spacing."""
    return 5.0 * mean_spacing(np.asarray(points))


def _pair_features(pts, nrm, src, dst):
    """Darboux-frame angles (alpha, phi, theta) for directed pairs; invalid pairs masked."""
    d = pts[dst] - pts[src]
    dist = np.linalg.norm(d, axis=1)
    safe = np.where(dist > 0, dist, 1.0)
    n_s, n_t = nrm[src], nrm[dst]
    a_s = np.einsum("ij,ij->i", n_s, d) / safe
    a_t = np.einsum("ij,ij->i", n_t, d) / safe
    # source = endpoint whose normal makes the smaller angle with the connecting line
    swap = np.abs(a_s) < np.abs(a_t)
    u = np.where(swap[:, None], n_t, n_s)
    nt = np.where(swap[:, None], n_s, n_t)
    d = np.where(swap[:, None], -d, d)
    phi = np.where(swap, -a_t, a_s)
    v = np.cross(d, u)
    v_norm = np.linalg.norm(v, axis=1)
    valid = (dist > 0) & (v_norm > 0)
    v = v / np.where(v_norm > 0, v_norm, 1.0)[:, None]
    w = np.cross(u, v)
    alpha = np.einsum("ij,ij->i", v, nt)
    theta = np.arctan2(np.einsum("ij,ij->i", w, nt), np.einsum("ij,ij->i", u, nt))
    return alpha, phi, theta, valid, dist


def _bin(values, lo, hi):
    b = np.floor(N_BINS * (values - lo) / (hi - lo)).astype(np.int64)
    return np.clip(b, 0, N_BINS - 1)


def _normalize_blocks(hist, total=100.0):
    out = hist.copy()
    for b in range(3):
        block = out[:, b * N_BINS:(b + 1) * N_BINS]
        sums = block.sum(axis=1, keepdims=True)
        np.divide(block * total, sums, out=block, where=sums > 0)
    return out


def _neighbor_pairs(index: SpatialIndex, pts, radius):
    lists = index.neighbor_lists(pts, radius)
    counts = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
    src = np.repeat(np.arange(len(pts)), counts)
    dst = np.concatenate(lists) if len(lists) else np.zeros(0, dtype=np.int64)
    keep = src != dst
    return src[keep], dst[keep]


def fpfh(cloud: PointCloud, radius: float | None = None, index: SpatialIndex | None = None) -> FeatureSet:
    """33-bin Fast Point Feature Histograms over radius neighbourhoods.

    Points with no usable neighbour get an all-zero row and are marked in
    ``FeatureSet.degenerate``. Every other row has three 11-bin blocks each
    summing to 100.
    """
    if cloud.normals is None:
        raise ValueError("fpfh requires normals")
    if radius is None:
        radius = default_feature_radius(cloud.points)
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    pts, nrm = cloud.points, cloud.normals
    n = len(pts)
    index = index or SpatialIndex(pts)
    src, dst = _neighbor_pairs(index, pts, radius)
    alpha, phi, theta, valid, dist = _pair_features(pts, nrm, src, dst)

    s = src[valid]
    keys = np.concatenate([
        s * FPFH_DIM + _bin(alpha[valid], -1.0, 1.0),
        s * FPFH_DIM + N_BINS + _bin(phi[valid], -1.0, 1.0),
        s * FPFH_DIM + 2 * N_BINS + _bin(theta[valid], -np.pi, np.pi),
    ])
    spfh = np.bincount(keys, minlength=n * FPFH_DIM).astype(np.float64).reshape(n, FPFH_DIM)
    spfh = _normalize_blocks(spfh)

    # weighted neighbour aggregation: (1/k) * sum(SPFH(p_i) / |p - p_i|)
    pos = dist > 0
    k = np.bincount(src[pos], minlength=n).astype(np.float64)
    weights = 1.0 / (k[src[pos]] * dist[pos])
    agg = sparse.csr_matrix((weights, (src[pos], dst[pos])), shape=(n, n))
    hist = _normalize_blocks(spfh + agg @ spfh)
    degenerate = hist.sum(axis=1) == 0
    return FeatureSet(hist, np.arange(n), FPFH, {"radius": float(radius)}, degenerate)


def contextual_features(cloud: PointCloud, fpfh_set: FeatureSet, pooling_radius: float,
                        index: SpatialIndex | None = None) -> FeatureSet:
    """Mean FPFH over each point's pooling-radius neighbourhood (self included)."""
    n = len(cloud)
    if len(fpfh_set) != n or not np.array_equal(fpfh_set.point_indices, np.arange(n)):
        raise ValueError("fpfh_set must be aligned row-for-row with the cloud")
    if not pooling_radius > 0:
        raise ValueError(f"pooling radius must be positive, got {pooling_radius}")
    index = index or SpatialIndex(cloud.points)
    lists = index.neighbor_lists(cloud.points, pooling_radius)
    counts = np.fromiter((len(l) for l in lists), dtype=np.int64, count=n)
    rows = np.repeat(np.arange(n), counts)
    cols = np.concatenate(lists)
    pool = sparse.csr_matrix((1.0 / counts[rows], (rows, cols)), shape=(n, n))
    matrix = pool @ fpfh_set.matrix
    params = dict(fpfh_set.params)
    params.pop("blocks", None)
    params["pooling_radius"] = float(pooling_radius)
    return FeatureSet(matrix, np.arange(n), CONTEXTUAL, params)


def concat_features(a: FeatureSet, b: FeatureSet, block_scales=(1.0, 1.0)) -> FeatureSet:
    """Row-wise concatenation with each block multiplied by its scale."""
    if not np.array_equal(a.point_indices, b.point_indices):
        raise ValueError("feature sets are bound to different point indices")
    sa, sb = (float(s) for s in block_scales)
    matrix = np.hstack([a.matrix * sa, b.matrix * sb])
    params = {
        "parts": [a.kind, b.kind],
        "block_scales": [sa, sb],
        "blocks": list(a.params["blocks"]) + list(b.params["blocks"]),
        "a": {k: v for k, v in a.params.items() if k != "blocks"},
        "b": {k: v for k, v in b.params.items() if k != "blocks"},
    }
    return FeatureSet(matrix, a.point_indices.copy(), CONCAT, params)
