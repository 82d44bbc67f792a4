"""Method recipes: fit banks on a category's prototypes, then score test scans."""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from . import features as F
from .bank import DEFAULT_B, DEFAULT_BANK_SIZE, ScoreVector, build_bank, combine_dual, point_scores
from .cloud import PointCloud, RigidTransform, estimate_normals, mean_spacing, random_subsample
from .dataio import CategoryEntry, load_test_sample, read_ply
from .metrics import SampleScores, propagate_scores
from .registration import (
    PipelineParams, PrototypeModel, RansacParams, evaluate_registration, register_to_best,
    register_to_prototype,
)

log = logging.getLogger(__name__)


class MethodId(str, Enum):
    BTF_RAW = "btf_raw"
    BTF_FPFH = "btf_fpfh"
    PATCHCORE_FPFH = "patchcore_fpfh"
    PATCHCORE_FPFH_RAW = "patchcore_fpfh_raw"
    REG3D_AD = "reg3d_ad"

    @classmethod
    def parse(cls, name: str) -> "MethodId":
        try:
            return cls(name)
        except ValueError:
            known = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown method {name!r}; known: {known}") from None


ALL_METHODS = [m.value for m in MethodId]


@dataclass
class MethodParams:
    """Knobs shared by every recipe.

    Attributes:
        train_ratio: keep 1 of every `train_ratio` prototype points.
        test_ratio: keep 1 of every `test_ratio` test points for scoring.
        bank_size: coreset target for the PatchCore-style recipes.
        b: re-weighting neighbourhood size.
        propagate_k: neighbours used to spread sampled scores to all points.
        feature_radius_factor: FPFH radius as a multiple of the subsampled
            prototype spacing; fixed per category and reused for test scans.
        pooling_factor: contextual pooling radius as a multiple of the FPFH radius.
        raw_block_scale: weight of the xyz block in patchcore_fpfh_raw.
        standardize: divide each reg3d_ad channel by its bank's typical
            nearest-neighbour spacing before averaging.
        align_prototypes: register prototypes 2..n onto prototype 1 first.
        view_augmentation: number of simulated one-side views per prototype
            whose contextual features are added to the reg3d_ad global bank.
        coverage: add the reverse (prototype to test) distance of registered
            surface that should be visible but has no test points to the
            reg3d_ad local channel.
        coverage_margin_deg: visibility test is tightened by this angle to
            stay clear of the scan silhouette.
        coverage_gap_factor: a prototype point is a gap when its nearest test
            point is farther than this multiple of the test spacing.
        coverage_band: gap distance d is assigned to test points within
            d * (1 + band) of the gap point.
        registration: overrides for the registration pipeline parameters.
    """

    train_ratio: int = 100
    test_ratio: int = 500
    bank_size: int = DEFAULT_BANK_SIZE
    b: int = DEFAULT_B
    propagate_k: int = 3
    normal_k: int = 16
    feature_radius_factor: float = 5.0
    pooling_factor: float = 4.0
    raw_block_scale: float = 1.0
    standardize: bool = False
    align_prototypes: bool = True
    view_augmentation: int = 6
    coverage: bool = True
    coverage_margin_deg: float = 15.0
    coverage_gap_factor: float = 2.0
    coverage_band: float = 0.25
    cull_angle_deg: float = 80.0
    projection_dim: int | None = None
    registration: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.train_ratio < 1 or self.test_ratio < 1:
            raise ValueError("subsample ratios must be >= 1")
        if self.b < 2:
            raise ValueError("b must be >= 2")

    @classmethod
    def from_dict(cls, d: dict) -> "MethodParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown method parameters: {sorted(unknown)}")
        return cls(**d)

    def pipeline(self) -> PipelineParams:
        reg = dict(self.registration)
        ransac = RansacParams(**reg.pop("ransac", {}))
        return PipelineParams(ransac=ransac, **reg)


def derive_seed(seed: int, *keys: str) -> int:
    """Stable integer seed from a base seed and string keys."""
    words = [int(seed)] + [zlib.crc32(k.encode("utf-8")) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class SampleResult:
    scores: SampleScores
    seconds: float
    registration: dict | None = None


def _with_normals(cloud: PointCloud, k: int, ref) -> PointCloud:
    return estimate_normals(PointCloud(cloud.points), k, ref)


def _outward(cloud: PointCloud, k: int) -> PointCloud:
    """Keep stored normals, otherwise estimate them pointing away from the centroid."""
    if cloud.normals is not None:
        return cloud
    est = estimate_normals(PointCloud(cloud.points), k, cloud.points.mean(axis=0))
    return est.with_normals(-est.normals)


def view_directions(n: int) -> np.ndarray:
    """n roughly uniform unit vectors on a Fibonacci spiral."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    a = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.column_stack([r * np.cos(a), r * np.sin(a), z])


def coverage_gap_scores(test_points, proto: PointCloud, cull_angle_deg=80.0, margin_deg=15.0,
                        gap_factor=2.0, band=0.25) -> np.ndarray:
    """Per-test-point distance to nearby prototype surface that the scan misses.

    The viewing direction is estimated from the prototype normals under the
    test points. Prototype points that should face the viewer (with a margin
    toward the silhouette) but lie farther than ``gap_factor`` test spacings
    from every test point are gaps; each gap's distance d is assigned to the
    test points within d * (1 + band) of it.
    """
    test_points = np.asarray(test_points, dtype=np.float64)
    out = np.zeros(len(test_points))
    tree = cKDTree(test_points)
    _, nn = cKDTree(proto.points).query(test_points)
    mean_n = proto.normals[nn].mean(axis=0)
    norm = np.linalg.norm(mean_n)
    if norm == 0:
        return out
    view = -mean_n / norm
    vis = proto.normals @ view < -np.cos(np.radians(cull_angle_deg - margin_deg))
    q = proto.points[vis]
    if len(q) == 0:
        return out
    dq, _ = tree.query(q)
    gap = dq > gap_factor * mean_spacing(test_points)
    for pt, d in zip(q[gap], dq[gap]):
        idx = tree.query_ball_point(pt, d * (1.0 + band))
        out[idx] = np.maximum(out[idx], d)
    return out


class CategoryModel:
    """Banks fitted on one category's prototypes for one method."""

    def __init__(self, method: MethodId, prototypes: list, params: MethodParams, seed: int):
        self.method = MethodId(method)
        self.params = params
        self.seed = seed
        self.prototypes = list(prototypes)
        p = params
        if self.method is MethodId.REG3D_AD:
            self.pipeline = p.pipeline()
            first = PrototypeModel(self.prototypes[0], self.pipeline)
            # one voxel and radius per category so a test scan is described once
            self.pipeline = replace(self.pipeline, voxel=first.voxel, feature_radius=first.feature_radius)
            self.prototypes = self._aligned_prototypes(first)
            self.models = [first] + [PrototypeModel(c, self.pipeline) for c in self.prototypes[1:]]
        self.centroid = self.prototypes[0].points.mean(axis=0)
        subs = [random_subsample(c, p.train_ratio, derive_seed(seed, "train", str(i)))[0]
                for i, c in enumerate(self.prototypes)]
        self.feature_radius = p.feature_radius_factor * mean_spacing(subs[0].points)
        m = self.method
        keep_all = m in (MethodId.BTF_RAW, MethodId.BTF_FPFH)
        size = None if keep_all else p.bank_size
        self.reweight = not keep_all
        bank_seed = derive_seed(seed, "bank")
        if m is MethodId.BTF_RAW:
            self.bank = build_bank([F.raw_features(s) for s in subs], size, bank_seed)
        elif m in (MethodId.BTF_FPFH, MethodId.PATCHCORE_FPFH):
            sets = [self._fpfh(s, s.points.mean(axis=0)) for s in subs]
            self.bank = build_bank(sets, size, bank_seed, projection_dim=p.projection_dim)
        elif m is MethodId.PATCHCORE_FPFH_RAW:
            sets = [F.concat_features(self._fpfh(s, s.points.mean(axis=0)), F.raw_features(s)) for s in subs]
            self.bank = build_bank(sets, size, bank_seed, projection_dim=p.projection_dim,
                                   block_weights=(1.0, p.raw_block_scale))
        else:
            self.local_bank = build_bank([F.raw_features(s) for s in subs], size, bank_seed)
            self.outward = [_outward(s, p.normal_k) for s in subs]
            ctx = [self._contextual(s, self.centroid) for s in subs]
            for s in self.outward if p.view_augmentation else []:
                for v in view_directions(p.view_augmentation):
                    vis = s.normals @ v < -np.cos(np.radians(p.cull_angle_deg))
                    if vis.sum() > p.normal_k:
                        ctx.append(self._contextual(PointCloud(s.points[vis]), self.centroid))
            self.global_bank = build_bank(ctx, size, derive_seed(seed, "global"),
                                          projection_dim=p.projection_dim)

    def _aligned_prototypes(self, ref: PrototypeModel):
        protos = self.prototypes
        if not self.params.align_prototypes or len(protos) < 2:
            return protos
        out = [protos[0]]
        for c in protos[1:]:
            aligned, res = register_to_prototype(c, ref)
            thr = 1.5 * ref.voxel
            base, _ = evaluate_registration(c, ref.full_index, RigidTransform.identity(), thr)
            out.append(aligned if not res.failed and res.fitness > base else c)
        return out

    def _fpfh(self, sub: PointCloud, ref) -> F.FeatureSet:
        return F.fpfh(_with_normals(sub, self.params.normal_k, ref), self.feature_radius)

    def _contextual(self, sub: PointCloud, ref) -> F.FeatureSet:
        withn = _with_normals(sub, self.params.normal_k, ref)
        base = F.fpfh(withn, self.feature_radius)
        return F.contextual_features(withn, base, self.params.pooling_factor * self.feature_radius)

    def score(self, test: PointCloud, sample_seed: int):
        """Full-resolution ScoreVector for one test scan, plus registration info."""
        p = self.params
        m = self.method
        reg_info = None
        cloud = test
        if m is MethodId.REG3D_AD:
            cloud, res, pos = register_to_best(test, self.models, self.pipeline)
            reg_info = {"prototype": pos, "fitness": res.fitness, "rmse": res.inlier_rmse,
                        "failed": bool(res.failed)}
        sub, _ = random_subsample(cloud, p.test_ratio, sample_seed)
        own_ref = sub.points.mean(axis=0)
        if m is MethodId.BTF_RAW:
            s = point_scores(self.bank, F.raw_features(sub), p.b, self.reweight)
            sv = ScoreVector.from_points(s)
        elif m in (MethodId.BTF_FPFH, MethodId.PATCHCORE_FPFH):
            s = point_scores(self.bank, self._fpfh(sub, own_ref), p.b, self.reweight)
            sv = ScoreVector.from_points(s)
        elif m is MethodId.PATCHCORE_FPFH_RAW:
            feats = F.concat_features(self._fpfh(sub, own_ref), F.raw_features(sub))
            sv = ScoreVector.from_points(point_scores(self.bank, feats, p.b, self.reweight))
        else:
            ref = own_ref if reg_info["failed"] else self.centroid
            local = point_scores(self.local_bank, F.raw_features(sub), p.b)
            if p.coverage and not reg_info["failed"]:
                gap = coverage_gap_scores(sub.points, self.outward[pos], p.cull_angle_deg,
                                          p.coverage_margin_deg, p.coverage_gap_factor, p.coverage_band)
                local = np.maximum(local, gap * self.local_bank.scales[0])
            local = ScoreVector.from_points(local)
            glob = ScoreVector.from_points(point_scores(self.global_bank, self._contextual(sub, ref), p.b))
            ls, gs = (self.local_bank.self_scale, self.global_bank.self_scale) if p.standardize else (1.0, 1.0)
            sv = combine_dual(local, glob, ls, gs)
        full = propagate_scores(sub.points, sv.scores, cloud.points, p.propagate_k)
        return ScoreVector(full, sv.object_score), reg_info


def fit_category(method, entry: CategoryEntry, params: MethodParams, seed: int) -> CategoryModel:
    protos = [read_ply(path) for path in entry.train_paths]
    # seeded per category only, so every method sees the same subsamples
    return CategoryModel(MethodId(method), protos, params, derive_seed(seed, entry.name))


def run_method(method, entry: CategoryEntry, params: MethodParams, seed: int = 0):
    """Fit `method` on one category and score every test sample.

    Returns:
        (list of SampleResult in test order, fit seconds).
    """
    t0 = time.perf_counter()
    model = fit_category(method, entry, params, seed)
    fit_seconds = time.perf_counter() - t0
    out = []
    for i in range(len(entry.test_paths)):
        t1 = time.perf_counter()
        test = load_test_sample(entry, i)
        name = entry.sample_name(i)
        sv, reg = model.score(test, derive_seed(seed, entry.name, name))
        labels = np.asarray(test.labels, dtype=np.uint8)
        scores = SampleScores(name, int(entry.is_abnormal(i)), sv.object_score, sv.scores, labels)
        out.append(SampleResult(scores, time.perf_counter() - t1, reg))
    return out, fit_seconds


def params_closure(params: MethodParams) -> dict:
    """Every parameter that influences a run, including registration defaults."""
    d = asdict(params)
    d["registration"] = asdict(params.pipeline())
    return d

