"""Rigid alignment of a one-side test scan onto a full prototype.

Global pose from FPFH correspondences with RANSAC, then point-to-point ICP.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import PointCloud, RigidTransform, apply_transform, bounding_box, estimate_normals, mean_spacing, voxel_downsample
from .features import FeatureSet, fpfh
from .spatial import SpatialIndex

log = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    pass


class DegenerateConfigurationError(ValueError):
    pass


@dataclass
class RegistrationResult:
    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    iterations_used: int
    failed: bool = False
    rmse_history: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ValueError(f"fitness {self.fitness} outside [0, 1]")
        if self.inlier_rmse < 0:
            raise ValueError("inlier_rmse must be non-negative")


@dataclass
class RansacParams:
    n_sample_correspondences: int = 4
    max_iterations: int = 100_000
    inlier_threshold: float | None = None  # mm; None -> 1.5 x voxel size
    mutual_filter: bool = False
    edge_length_check_ratio: float = 0.9
    confidence: float = 0.999
    seed: int = 0
    batch_size: int = 2048
    eval_points: int = 512

    def __post_init__(self):
        if self.n_sample_correspondences < 3:
            raise ValueError("RANSAC needs at least 3 correspondences per sample")
        if self.inlier_threshold is not None and not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0 < self.edge_length_check_ratio <= 1:
            raise ValueError("edge_length_check_ratio must be in (0, 1]")


def _as_matrix(f):
    return f.matrix if isinstance(f, FeatureSet) else np.asarray(f, dtype=np.float64)


def match_correspondences(feat_src, feat_dst, mutual: bool = False) -> np.ndarray:
    """Nearest destination row (feature space) for every source row.

    Returns:
        (C, 2) int array of (i_src, i_dst); with `mutual`, only pairs that are
        each other's nearest neighbour survive.
    """
    fs, fd = _as_matrix(feat_src), _as_matrix(feat_dst)
    if fs.shape[1] != fd.shape[1]:
        raise ValueError(f"feature dimensions differ: {fs.shape[1]} vs {fd.shape[1]}")
    nn_dst, _ = SpatialIndex(fd).knn_batch(fs, 1)
    pairs = np.column_stack([np.arange(len(fs)), nn_dst[:, 0]])
    if mutual:
        nn_src, _ = SpatialIndex(fs).knn_batch(fd, 1)
        pairs = pairs[nn_src[pairs[:, 1], 0] == pairs[:, 0]]
    return pairs


def _kabsch(src, dst):
    """Batched least-squares rotation/translation; src, dst are (..., n, 3)."""
    mu_s = src.mean(axis=-2)
    mu_d = dst.mean(axis=-2)
    cov = np.swapaxes(src - mu_s[..., None, :], -1, -2) @ (dst - mu_d[..., None, :])
    u, s, vt = np.linalg.svd(cov)
    v = np.swapaxes(vt, -1, -2)
    ut = np.swapaxes(u, -1, -2)
    d = np.sign(np.linalg.det(v @ ut))
    d = np.where(d == 0, 1.0, d)
    fix = np.ones(s.shape)
    fix[..., 2] = d
    rot = (v * fix[..., None, :]) @ ut
    trans = mu_d - np.einsum("...ij,...j->...i", rot, mu_s)
    ok = s[..., 1] > 1e-12 * np.maximum(s[..., 0], 1e-300)
    return rot, trans, ok


def estimate_rigid(src_pts, dst_pts) -> RigidTransform:
    """Closed-form minimizer of sum ||R s_i + t - d_i||^2 (SVD with reflection fix)."""
    src = np.asarray(src_pts, dtype=np.float64)
    dst = np.asarray(dst_pts, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must be matching (n, 3) arrays")
    if len(src) < 3:
        raise DegenerateConfigurationError(f"need at least 3 point pairs, got {len(src)}")
    rot, trans, ok = _kabsch(src, dst)
    if not ok:
        raise DegenerateConfigurationError("cross-covariance has rank < 2 (collinear points)")
    # SVD rounding can leave the rotation a few ulps off orthonormal
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    return RigidTransform(rot, trans)


def _edge_consistent(s, d, ratio):
    n = s.shape[1]
    ok = np.ones(len(s), dtype=bool)
    for a, b in itertools.combinations(range(n), 2):
        ls = np.linalg.norm(s[:, a] - s[:, b], axis=1)
        ld = np.linalg.norm(d[:, a] - d[:, b], axis=1)
        ok &= (ls >= ratio * ld) & (ld >= ratio * ls)
    return ok


def _fit_stats(tree, pts, threshold):
    dist, _ = tree.query(pts, k=1, distance_upper_bound=threshold)
    inl = np.isfinite(dist)
    count = int(inl.sum())
    rmse = float(np.sqrt(np.mean(dist[inl] ** 2))) if count else 0.0
    return count, rmse


def evaluate_registration(src: PointCloud, dst_index: SpatialIndex, t: RigidTransform, threshold: float):
    """(fitness, inlier_rmse) of `t` mapping src onto the indexed destination."""
    count, rmse = _fit_stats(dst_index._tree, t.apply(src.points), threshold)
    return count / max(len(src), 1), rmse


def ransac_register(src_cloud: PointCloud, dst_cloud: PointCloud, feat_src, feat_dst,
                    params: RansacParams, dst_index: SpatialIndex | None = None,
                    correspondences: np.ndarray | None = None) -> RegistrationResult:
    """Feature-correspondence RANSAC.

    Hypotheses are drawn in batches; each sample of n correspondences must pass
    the pairwise edge-length test before a rigid fit. Hypotheses are ranked by
    the number of (subset) source points landing within the inlier threshold of
    the destination, then by lower inlier RMSE, then by draw order. The loop
    stops at ``max_iterations`` or once the correspondence inlier ratio of the
    best hypothesis makes the confidence bound.
    """
    if params.inlier_threshold is None:
        raise ValueError("inlier_threshold must be set")
    thr = float(params.inlier_threshold)
    n = params.n_sample_correspondences
    corr = correspondences if correspondences is not None else match_correspondences(
        feat_src, feat_dst, params.mutual_filter)
    if len(corr) < n:
        raise RegistrationError(f"only {len(corr)} correspondences, need {n}")
    dst_index = dst_index or SpatialIndex(dst_cloud.points)
    tree = dst_index._tree
    cs = src_cloud.points[corr[:, 0]]
    cd = dst_cloud.points[corr[:, 1]]
    n_corr = len(corr)

    rng = np.random.default_rng(params.seed)
    m = min(params.eval_points, len(src_cloud))
    eval_pts = src_cloud.points[np.sort(rng.choice(len(src_cloud), size=m, replace=False))]

    best = None  # (count, -rmse, -iteration) ordering via tuple compare
    best_t = None
    best_corr_inliers = 0
    drawn = 0
    log_fail = math.log(1.0 - params.confidence)
    while drawn < params.max_iterations:
        b = min(params.batch_size, params.max_iterations - drawn)
        samp = rng.integers(0, n_corr, size=(b, n))
        iters = np.arange(drawn, drawn + b)
        drawn += b
        srt = np.sort(samp, axis=1)
        ok = np.all(srt[:, 1:] != srt[:, :-1], axis=1)
        s, d = cs[samp], cd[samp]
        ok &= _edge_consistent(s, d, params.edge_length_check_ratio)
        if ok.any():
            rot, trans, good = _kabsch(s[ok], d[ok])
            rot, trans, it = rot[good], trans[good], iters[ok][good]
            if len(rot):
                moved = np.einsum("hij,mj->hmi", rot, eval_pts) + trans[:, None, :]
                dist, _ = tree.query(moved.reshape(-1, 3), k=1, distance_upper_bound=thr)
                dist = dist.reshape(len(rot), m)
                inl = np.isfinite(dist)
                counts = inl.sum(axis=1)
                sq = np.where(inl, dist, 0.0) ** 2
                rmse = np.sqrt(sq.sum(axis=1) / np.maximum(counts, 1))
                order = np.lexsort((it, rmse, -counts))
                h = order[0]
                cand = (int(counts[h]), -float(rmse[h]), -int(it[h]))
                if counts[h] > 0 and (best is None or cand > best):
                    best = cand
                    best_t = (rot[h], trans[h])
                    moved_c = cs @ rot[h].T + trans[h]
                    best_corr_inliers = int((np.linalg.norm(moved_c - cd, axis=1) < thr).sum())
        if best is not None and best_corr_inliers > 0:
            w = best_corr_inliers / n_corr
            p_good = w ** n
            if p_good >= 1.0:
                break
            need = log_fail / math.log1p(-p_good) if p_good > 0 else math.inf
            if drawn >= need:
                break

    if best is None:
        return RegistrationResult(RigidTransform.identity(), 0.0, 0.0, drawn, failed=True)
    t = RigidTransform(*best_t)
    # refit on the correspondence inliers when that does not lose subset inliers
    moved_c = t.apply(cs)
    inl = np.linalg.norm(moved_c - cd, axis=1) < thr
    if inl.sum() >= 3:
        try:
            t_ref = estimate_rigid(cs[inl], cd[inl])
            c_ref, r_ref = _fit_stats(tree, t_ref.apply(eval_pts), thr)
            if (c_ref, -r_ref) >= best[:2]:
                t = t_ref
        except DegenerateConfigurationError:
            pass
    fitness, rmse = evaluate_registration(src_cloud, dst_index, t, thr)
    return RegistrationResult(t, fitness, rmse, drawn, failed=fitness == 0.0)


def icp_refine(src: PointCloud, dst: PointCloud, t0: RigidTransform, max_corr_dist: float,
               max_iters: int = 50, dst_index: SpatialIndex | None = None,
               tol: float = 1e-6) -> RegistrationResult:
    """Point-to-point ICP from `t0`; returns the lowest-RMSE transform visited."""
    if not max_corr_dist > 0:
        raise ValueError("max_corr_dist must be positive")
    dst_index = dst_index or SpatialIndex(dst.points)
    tree = dst_index._tree
    t = t0
    best = None
    history = []
    iters = 0
    for step in range(max_iters + 1):
        dist, j = tree.query(t.apply(src.points), k=1, distance_upper_bound=max_corr_dist)
        inl = np.isfinite(dist)
        count = int(inl.sum())
        if count == 0:
            if step == 0:
                raise RegistrationError(f"no correspondences within {max_corr_dist} mm at the initial pose")
            break
        rmse = float(np.sqrt(np.mean(dist[inl] ** 2)))
        history.append(rmse)
        if best is None or rmse < best[1]:
            best = (t, rmse, count / len(src))
        if step > 0 and history[-2] - rmse < tol:
            break
        if step == max_iters or count < 3:
            break
        try:
            t = estimate_rigid(src.points[inl], dst.points[j[inl]])
        except DegenerateConfigurationError:
            break
        iters += 1
    return RegistrationResult(best[0], float(best[2]), best[1], iters, rmse_history=history)


@dataclass
class PipelineParams:
    voxel: float | None = None           # None -> prototype bbox diagonal / 60
    voxel_fraction: float = 1.0 / 60.0
    normal_k: int = 16
    feature_radius_factor: float = 12.0  # x mean spacing of the downsampled prototype
    feature_radius: float | None = None  # mm; overrides the factor when set
    ransac: RansacParams = field(default_factory=RansacParams)
    icp: bool = True
    icp_coarse_factor: float = 2.0       # x voxel
    icp_fine_factor: float = 0.5         # x voxel
    icp_max_iters: int = 100
    fitness_floor: float = 0.2


class PrototypeModel:
    """A prototype prepared once as a registration target."""

    def __init__(self, cloud: PointCloud, params: PipelineParams | None = None):
        params = params or PipelineParams()
        self.cloud = cloud
        self.params = params
        self.voxel = params.voxel or bounding_box(cloud).diagonal * params.voxel_fraction
        self.down, _ = voxel_downsample(PointCloud(cloud.points), self.voxel)
        self.centroid = cloud.points.mean(axis=0)
        self.down = estimate_normals(self.down, params.normal_k, self.centroid)
        self.feature_radius = params.feature_radius or params.feature_radius_factor * mean_spacing(self.down.points)
        self.down_index = SpatialIndex(self.down.points)
        self.features = fpfh(self.down, self.feature_radius, self.down_index)
        self.full_index = SpatialIndex(cloud.points)
        self.feature_index = SpatialIndex(self.features.matrix)


def prepare_test(test: PointCloud, model: PrototypeModel):
    down, _ = voxel_downsample(PointCloud(test.points), model.voxel)
    down = estimate_normals(down, model.params.normal_k, down.points.mean(axis=0))
    feats = fpfh(down, model.feature_radius)
    return down, feats


def register_to_prototype(test_cloud: PointCloud, prototype, params: PipelineParams | None = None,
                          prepared=None):
    """Align `test_cloud` onto `prototype` (a PointCloud or PrototypeModel).

    Returns:
        (aligned test cloud, RegistrationResult). If the final fitness is below
        ``fitness_floor`` the untransformed cloud is returned and the result is
        flagged ``failed``.
    """
    model = prototype if isinstance(prototype, PrototypeModel) else PrototypeModel(prototype, params)
    p = model.params if params is None else params
    down, feats = prepared if prepared is not None else prepare_test(test_cloud, model)
    rparams = p.ransac
    thr = rparams.inlier_threshold or 1.5 * model.voxel
    rparams = replace(rparams, inlier_threshold=thr)
    nn, _ = model.feature_index.knn_batch(feats.matrix, 1)
    corr = np.column_stack([np.arange(len(down)), nn[:, 0]])
    if rparams.mutual_filter:
        corr = match_correspondences(feats, model.features, mutual=True)
    try:
        result = ransac_register(down, model.down, feats, model.features, rparams,
                                 dst_index=model.down_index, correspondences=corr)
    except RegistrationError as exc:
        log.warning("RANSAC failed: %s", exc)
        result = RegistrationResult(RigidTransform.identity(), 0.0, 0.0, 0, failed=True)
    t = result.transform
    iters = result.iterations_used
    history = []
    if p.icp and not result.failed:
        # coarse stage on the downsampled scan, fine stage on every point
        for src, factor in ((down, p.icp_coarse_factor), (test_cloud, p.icp_fine_factor)):
            try:
                r = icp_refine(src, model.cloud, t, factor * model.voxel, p.icp_max_iters,
                               dst_index=model.full_index)
            except RegistrationError:
                break
            t = r.transform
            iters += r.iterations_used
            history += r.rmse_history
    fitness, rmse = evaluate_registration(test_cloud, model.full_index, t, thr)
    final = RegistrationResult(t, fitness, rmse, iters, rmse_history=history)
    if fitness < p.fitness_floor:
        log.warning("registration fitness %.3f below floor %.3f; returning unaligned cloud",
                    fitness, p.fitness_floor)
        final.failed = True
        return test_cloud, final
    return apply_transform(test_cloud, t), final


def register_to_best(test_cloud: PointCloud, models, params: PipelineParams | None = None):
    """Register against each prototype model; keep the highest fitness (first on ties).

    Returns:
        (aligned cloud, result, chosen prototype position).
    """
    best = None
    prepared = {}
    for pos, model in enumerate(models):
        key = (model.voxel, model.feature_radius)
        if key not in prepared:
            prepared[key] = prepare_test(test_cloud, model)
        aligned, res = register_to_prototype(test_cloud, model, params, prepared=prepared[key])
        if best is None or res.fitness > best[1].fitness:
            best = (aligned, res, pos)
    return best


def rotation_error_deg(estimated: RigidTransform, truth: RigidTransform) -> float:
    delta = RigidTransform(estimated.rotation @ truth.rotation.T, np.zeros(3))
    return math.degrees(delta.rotation_angle())
