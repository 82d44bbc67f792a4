"""Coreset memory banks and nearest-neighbour anomaly scoring with re-weighting."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import _atomic_write
from .features import FeatureSet
from .spatial import SpatialIndex

MAGIC = b"R3DBANK\x00"
VERSION = 1
DEFAULT_BANK_SIZE = 10000
DEFAULT_B = 3


def greedy_coreset(features, m: int, seed=0, projection_dim: int | None = None, start: int | None = None):
    """Greedy k-center (farthest-point-first) selection.

    Args:
        features: (N, D) rows.
        m: number of rows to select, 1 <= m <= N.
        seed: picks the first row (unless `start` is given) and the projection.
        projection_dim: if set, distances are computed after a Gaussian random
            projection to this many dimensions.

    Returns:
        Selected row indices in selection order.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if not 1 <= m <= n:
        raise ValueError(f"coreset size {m} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(n)) if start is None else int(start)
    if projection_dim:
        proj = rng.normal(size=(x.shape[1], int(projection_dim))) / np.sqrt(projection_dim)
        x = x @ proj
    sq = np.einsum("ij,ij->i", x, x)

    def dist2(i):
        return np.maximum(sq + sq[i] - 2.0 * (x @ x[i]), 0.0)

    selected = np.empty(m, dtype=np.int64)
    selected[0] = first
    min_d = dist2(first)
    min_d[first] = -1.0
    for j in range(1, m):
        nxt = int(np.argmax(min_d))
        selected[j] = nxt
        np.minimum(min_d, dist2(nxt), out=min_d)
        min_d[nxt] = -1.0
    return selected


def coverage_radius(features, selected) -> float:
    """Largest distance from any row to its nearest selected row."""
    x = np.asarray(features, dtype=np.float64)
    _, d = SpatialIndex(x[np.asarray(selected)]).knn_batch(x, 1)
    return float(d.max())


class MemoryBank:
    """Coreset-reduced, block-normalized feature rows with an exact NN index.

    Attributes:
        rows: (M, D) normalized bank rows.
        kind: feature kind of the rows.
        blocks: column width of each block.
        scales: per-block multiplier applied to raw features before comparison.
        source: (M,) prototype position each row came from.
    """

    def __init__(self, rows, kind, blocks, scales, source=None, params=None):
        rows = np.ascontiguousarray(rows, dtype=np.float64)
        if rows.ndim != 2 or len(rows) == 0:
            raise ValueError("memory bank needs at least one row")
        if sum(blocks) != rows.shape[1] or len(blocks) != len(scales):
            raise ValueError("block layout does not match row width")
        rows.setflags(write=False)
        self.rows = rows
        self.kind = kind
        self.blocks = [int(b) for b in blocks]
        self.scales = np.asarray(scales, dtype=np.float64)
        self.source = np.zeros(len(rows), dtype=np.int32) if source is None else np.asarray(source, dtype=np.int32)
        self.params = dict(params or {})
        self.index = SpatialIndex(rows)
        self._neighbors = {}
        self._self_scale = None

    def __len__(self):
        return len(self.rows)

    @property
    def dim(self):
        return self.rows.shape[1]

    def normalize(self, matrix) -> np.ndarray:
        """Apply the frozen per-block scales to raw feature rows."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape[1] != self.dim:
            raise ValueError(f"feature dimension {matrix.shape[1]} != bank dimension {self.dim}")
        col_scale = np.repeat(self.scales, self.blocks)
        return matrix * col_scale

    def neighbor_table(self, b: int, include_self: bool = True) -> np.ndarray:
        """(M, b) bank neighbours of every bank row; column 0 is the row itself."""
        key = (b, include_self)
        if key not in self._neighbors:
            m = len(self)
            need = b if include_self else b + 1
            kk = min(need + 1, m)
            cand, _ = self.index.knn_batch(self.rows, kk)
            own = np.arange(m)[:, None]
            others = np.where(cand == own, m, cand)
            # push self to the end, keep the remaining order (ascending distance)
            order = np.argsort(others == m, axis=1, kind="stable")
            others = np.take_along_axis(others, order, axis=1)
            width = b - 1 if include_self else b
            table = others[:, :width]
            if include_self:
                table = np.hstack([own, table])
            self._neighbors[key] = table
        return self._neighbors[key]

    @property
    def self_scale(self) -> float:
        """Median distance from a bank row to its nearest other bank row."""
        if self._self_scale is None:
            if len(self) < 2:
                self._self_scale = 1.0
            else:
                _, d = self.index.knn_batch(self.rows, 2)
                med = float(np.median(d[:, 1]))
                self._self_scale = med if med > 0 else 1.0
        return self._self_scale


def _block_scales(pool, blocks):
    scales = []
    start = 0
    for width in blocks:
        norms = np.linalg.norm(pool[:, start:start + width], axis=1)
        mean = float(norms.mean())
        scales.append(1.0 / mean if mean > 0 else 1.0)
        start += width
    return np.array(scales)


def build_bank(prototype_feature_sets, target_size: int | None = DEFAULT_BANK_SIZE, seed=0,
               normalize: bool = True, projection_dim: int | None = None,
               block_weights=None) -> MemoryBank:
    """Pool prototype features, normalize per block, and coreset-reduce.

    A `target_size` of None, or one at least the pool size, keeps every row.
    Normalization divides each block by its mean row norm over the pool (a
    block that is zero everywhere keeps scale 1). `block_weights` multiply the
    normalized blocks afterwards.
    """
    sets = list(prototype_feature_sets)
    if not sets or sum(len(s) for s in sets) == 0:
        raise ValueError("cannot build a memory bank from an empty pool")
    kind, dim = sets[0].kind, sets[0].dim
    blocks = list(sets[0].params["blocks"])
    for s in sets[1:]:
        if s.kind != kind or s.dim != dim:
            raise ValueError("all prototype feature sets must share kind and dimension")
    pool = np.vstack([s.matrix for s in sets])
    source = np.concatenate([np.full(len(s), i, dtype=np.int32) for i, s in enumerate(sets)])
    scales = _block_scales(pool, blocks) if normalize else np.ones(len(blocks))
    if block_weights is not None:
        if len(block_weights) != len(blocks):
            raise ValueError(f"{len(block_weights)} block weights for {len(blocks)} blocks")
        scales = scales * np.asarray(block_weights, dtype=np.float64)
    pool = pool * np.repeat(scales, blocks)
    if target_size is not None and target_size < len(pool):
        keep = np.sort(greedy_coreset(pool, int(target_size), seed, projection_dim))
        pool, source = pool[keep], source[keep]
    params = {"target_size": target_size, "seed": seed, "normalize": normalize,
              "projection_dim": projection_dim, "pool_size": int(sum(len(s) for s in sets))}
    params.update({k: v for k, v in sets[0].params.items() if k != "blocks"})
    return MemoryBank(pool, kind, blocks, scales, source, params)


def reweight_factor(d_star, neighbor_dists):
    """1 - exp(d*) / sum(exp(d_j)), evaluated with the max distance shifted out."""
    d_star = np.asarray(d_star, dtype=np.float64)
    nd = np.asarray(neighbor_dists, dtype=np.float64)
    shift = np.maximum(nd.max(axis=-1), d_star)
    num = np.exp(d_star - shift)
    den = np.exp(nd - shift[..., None]).sum(axis=-1)
    return 1.0 - num / den


def point_scores(bank: MemoryBank, test_features, b: int = DEFAULT_B, reweight: bool = True,
                 include_self: bool = True) -> np.ndarray:
    """Per-feature anomaly scores against `bank`.

    Each test row scores its distance d* to the nearest bank row m*, scaled by
    the re-weighting factor over the b bank neighbours of m* (m* included by
    default). With ``reweight=False`` the score is d* itself.
    """
    matrix = test_features.matrix if isinstance(test_features, FeatureSet) else test_features
    if reweight and b < 2:
        raise ValueError("re-weighting needs b >= 2")
    if reweight and len(bank) < b:
        raise ValueError(f"bank has {len(bank)} rows, fewer than b={b}")
    x = bank.normalize(matrix)
    nn, d = bank.index.knn_batch(x, 1)
    d_star = d[:, 0]
    if not reweight:
        return d_star
    neigh = bank.neighbor_table(b, include_self)[nn[:, 0]]
    diff = x[:, None, :] - bank.rows[neigh]
    nd = np.sqrt(np.einsum("qbj,qbj->qb", diff, diff))
    if include_self:
        nd[:, 0] = d_star  # same quantity; avoid a second rounding path
    return reweight_factor(d_star, nd) * d_star


def object_score(per_point_scores) -> float:
    s = np.asarray(per_point_scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("object score of an empty score vector")
    return float(s.max())


@dataclass
class ScoreVector:
    scores: np.ndarray
    object_score: float

    @classmethod
    def from_points(cls, scores):
        scores = np.asarray(scores, dtype=np.float64)
        return cls(scores, object_score(scores))


def combine_dual(local: ScoreVector, global_: ScoreVector, local_scale: float = 1.0,
                 global_scale: float = 1.0) -> ScoreVector:
    """Mean of the two channels, per point and at object level.

    The optional scales divide each channel first (channel standardization).
    """
    ls = np.asarray(local.scores, dtype=np.float64)
    gs = np.asarray(global_.scores, dtype=np.float64)
    if ls.shape != gs.shape:
        raise ValueError(f"channel alignment mismatch: {ls.shape} vs {gs.shape}")
    per_point = (ls / local_scale + gs / global_scale) / 2.0
    obj = (local.object_score / local_scale + global_.object_score / global_scale) / 2.0
    return ScoreVector(per_point, float(obj))


# -- serialization ------------------------------------------------------------

def save_bank(bank: MemoryBank, path):
    """Binary container: magic, version, header JSON, little-endian float64 rows, int32 sources."""
    header = json.dumps({"kind": bank.kind, "dim": bank.dim, "size": len(bank), "blocks": bank.blocks,
                         "scales": [float(s).hex() for s in bank.scales], "params": bank.params},
                        sort_keys=True).encode("utf-8")
    payload = b"".join([
        MAGIC, struct.pack("<II", VERSION, len(header)), header,
        bank.rows.astype("<f8").tobytes(), bank.source.astype("<i4").tobytes(),
    ])
    _atomic_write(Path(path), payload)


def load_bank(path) -> MemoryBank:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a memory bank file")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported bank version {version}")
    pos = len(MAGIC) + 8
    head = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    m, dim = head["size"], head["dim"]
    need = pos + m * dim * 8 + m * 4
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(data)}")
    rows = np.frombuffer(data, dtype="<f8", count=m * dim, offset=pos).reshape(m, dim)
    source = np.frombuffer(data, dtype="<i4", count=m, offset=pos + m * dim * 8)
    scales = [float.fromhex(s) for s in head["scales"]]
    return MemoryBank(rows.astype(np.float64), head["kind"], head["blocks"], scales, source, head["params"])


def save_bank_text(bank: MemoryBank, path):
    """Human-readable form; floats are written as exact hex literals."""
    lines = [
        f"# reg3dad memory bank v{VERSION}",
        f"kind {bank.kind}",
        f"dim {bank.dim}",
        f"size {len(bank)}",
        "blocks " + " ".join(str(b) for b in bank.blocks),
        "scales " + " ".join(float(s).hex() for s in bank.scales),
        "params " + json.dumps(bank.params, sort_keys=True),
    ]
    for src, row in zip(bank.source, bank.rows):
        lines.append(f"{int(src)} " + " ".join(float(v).hex() for v in row))
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def load_bank_text(path) -> MemoryBank:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = {}
    body = []
    for line in lines:
        if line.startswith("#") or not line.strip():
            continue
        key, _, rest = line.partition(" ")
        if key in ("kind", "dim", "size", "blocks", "scales", "params"):
            head[key] = rest
        else:
            body.append(line.split())
    m, dim = int(head["size"]), int(head["dim"])
    if len(body) != m:
        raise ValueError(f"{path}: {len(body)} rows, header says {m}")
    source = [int(r[0]) for r in body]
    rows = np.array([[float.fromhex(v) for v in r[1:]] for r in body]).reshape(m, dim)
    return MemoryBank(rows, head["kind"], [int(b) for b in head["blocks"].split()],
                      [float.fromhex(s) for s in head["scales"].split()], source, json.loads(head["params"]))
