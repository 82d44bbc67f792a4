"""Exact nearest-neighbour and radius queries over fixed row sets.

Low-dimensional rows go through a kd-tree (scipy). For feature rows (D > 8) a
kd-tree only pays off when the rows have low intrinsic dimension, so the first
large knn batch times both a tree and a blocked linear scan on a probe and
keeps the faster one. Either way every answer is re-ranked with distances
recomputed as sqrt(sum((row - q)**2)), sorted by (distance, row index), so the
results do not depend on which backend produced the candidates.
"""

from __future__ import annotations

import time

import numpy as np
from scipy.spatial import cKDTree

KDTREE_MAX_DIM = 8
_PROBE = 128
_BLOCK_ELEMS = 1 << 22


def _exact(rows, q):
    diff = rows - q
    return np.sqrt(np.einsum("...j,...j->...", diff, diff))


def _sorted_pairs(idx, dist):
    order = np.lexsort((idx, dist))
    return idx[order], dist[order]


class SpatialIndex:
    """Immutable exact index over an (N, D) row matrix.

    Args:
        rows: N >= 1 rows of dimension D >= 1, all finite.
    """

    def __init__(self, rows):
        rows = np.array(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows.reshape(-1, 1)
        if rows.ndim != 2 or rows.shape[0] == 0 or rows.shape[1] == 0:
            raise ValueError(f"cannot index an empty row set of shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("rows must be finite")
        rows.setflags(write=False)
        self.rows = rows
        self.n, self.dim = rows.shape
        self._tree = cKDTree(rows) if self.dim <= KDTREE_MAX_DIM else None
        self._sqnorm = None if self._tree is not None else np.einsum("ij,ij->i", rows, rows)
        self._feature_tree = None
        self._backend = "tree" if self._tree is not None else None

    def __len__(self):
        return self.n

    def _check_queries(self, queries):
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim == 1:
            q = q.reshape(1, -1) if self.dim > 1 or q.size == 1 else q.reshape(-1, 1)
        if q.shape[1] != self.dim:
            raise ValueError(f"query dimension {q.shape[1]} != index dimension {self.dim}")
        return q

    def knn(self, q, k: int):
        """k exactly-nearest rows as a list of (row_index, distance), ascending."""
        q = np.asarray(q, dtype=np.float64).reshape(1, self.dim)
        idx, dist = self.knn_batch(q, k)
        return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]

    def radius_search(self, q, r: float):
        """All rows within distance r (inclusive) as (row_index, distance), ascending."""
        if r < 0:
            raise ValueError(f"radius must be non-negative, got {r}")
        q = np.asarray(q, dtype=np.float64).reshape(1, self.dim)
        idx, dist = self.radius_batch(q, r)[0]
        return [(int(i), float(d)) for i, d in zip(idx, dist)]

    def knn_batch(self, queries, k: int):
        """Vectorized knn.

        Returns:
            (indices, distances), both (Q, k), each row ascending with ties
            broken by lower row index.
        """
        k = int(k)
        if k < 1 or k > self.n:
            raise ValueError(f"k={k} outside [1, {self.n}]")
        q = self._check_queries(queries)
        if len(q) == 0:
            return np.zeros((0, k), dtype=np.int64), np.zeros((0, k))
        if self._backend is None and len(q) >= 2 * _PROBE:
            self._pick_backend(q[:_PROBE], k)
        if self._backend == "tree":
            return self._knn_tree(q, k)
        return self._knn_scan(q, k)

    def _pick_backend(self, probe, k):
        t0 = time.perf_counter()
        self._knn_scan(probe, k)
        t1 = time.perf_counter()
        tree = cKDTree(self.rows)
        tree.query(probe, min(k + 1, self.n))
        t2 = time.perf_counter()
        if t2 - t1 < t1 - t0:
            self._feature_tree = tree
            self._backend = "tree"
        else:
            self._backend = "scan"

    def _full_rank(self, q, k):
        idx, dist = _sorted_pairs(np.arange(self.n), _exact(self.rows, q))
        return idx[:k], dist[:k]

    def _knn_tree(self, q, k):
        tree = self._tree if self._tree is not None else self._feature_tree
        kk = min(k + 1, self.n)
        tree_d, cand = tree.query(q, kk)
        tree_d = tree_d.reshape(len(q), kk)
        cand = cand.reshape(len(q), kk).astype(np.int64)
        exact = _exact(self.rows[cand], q[:, None, :])
        order = np.lexsort((cand, exact), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)[:, :k]
        exact = np.take_along_axis(exact, order, axis=1)[:, :k]
        if kk == self.n:
            return cand, exact
        # rows outside the candidate set lie at tree distance >= tree_d[:, -1]
        dk = exact[:, -1]
        unsafe = np.nonzero(tree_d[:, -1] * (1.0 - 1e-12) <= dk + 1e-15)[0]
        for row in unsafe:
            r = dk[row] * (1.0 + 1e-9) + 1e-12
            ball = np.asarray(tree.query_ball_point(q[row], r), dtype=np.int64)
            idx, dist = _sorted_pairs(ball, _exact(self.rows[ball], q[row]))
            cand[row], exact[row] = idx[:k], dist[:k]
        return cand, exact

    def _knn_scan(self, q, k):
        nq = len(q)
        out_i = np.empty((nq, k), dtype=np.int64)
        out_d = np.empty((nq, k))
        c = min(self.n, k + 4)
        block = max(1, _BLOCK_ELEMS // self.n)
        xmax = float(self._sqnorm.max())
        for start in range(0, nq, block):
            qb = q[start:start + block]
            qn = np.einsum("ij,ij->i", qb, qb)
            d2 = qn[:, None] + self._sqnorm[None, :] - 2.0 * (qb @ self.rows.T)
            if c < self.n:
                full = np.argpartition(d2, c - 1, axis=1)
                part = full[:, :c]
                # every non-candidate has approximate d2 >= the partition pivot
                pivot = np.take_along_axis(d2, full[:, c - 1:c], axis=1)[:, 0]
            else:
                part = np.broadcast_to(np.arange(self.n), (len(qb), self.n)).copy()
            exact = _exact(self.rows[part], qb[:, None, :])
            order = np.lexsort((part, exact), axis=-1)
            part = np.take_along_axis(part, order, axis=1)
            exact = np.take_along_axis(exact, order, axis=1)
            out_i[start:start + len(qb)] = part[:, :k]
            out_d[start:start + len(qb)] = exact[:, :k]
            if c < self.n:
                tol = 1e-9 * (qn + xmax) + 1e-300
                unsafe = np.nonzero(pivot - tol <= exact[:, k - 1] ** 2)[0]
                for row in unsafe:
                    idx, dist = self._full_rank(qb[row], k)
                    out_i[start + row], out_d[start + row] = idx, dist
        return out_i, out_d

    def radius_batch(self, queries, r: float):
        """Vectorized radius search: list of (indices, distances) per query, ascending."""
        if r < 0:
            raise ValueError(f"radius must be non-negative, got {r}")
        q = self._check_queries(queries)
        out = []
        if self._tree is not None:
            balls = self._tree.query_ball_point(q, r * (1.0 + 1e-9) + 1e-12)
            for row, ball in enumerate(balls):
                ball = np.asarray(ball, dtype=np.int64)
                dist = _exact(self.rows[ball], q[row])
                keep = dist <= r
                out.append(_sorted_pairs(ball[keep], dist[keep]))
            return out
        for row in range(len(q)):
            dist = _exact(self.rows, q[row])
            ball = np.nonzero(dist <= r)[0]
            out.append(_sorted_pairs(ball, dist[ball]))
        return out

    def neighbor_lists(self, queries, r: float):
        """Unsorted in-radius row indices per query; cheap path for feature code."""
        q = self._check_queries(queries)
        if self._tree is None:
            return [idx for idx, _ in self.radius_batch(q, r)]
        return [np.asarray(b, dtype=np.int64) for b in self._tree.query_ball_point(q, r)]


def build(rows) -> SpatialIndex:
    return SpatialIndex(rows)


def knn(index: SpatialIndex, q, k: int):
    return index.knn(q, k)


def radius_search(index: SpatialIndex, q, r: float):
    return index.radius_search(q, r)
