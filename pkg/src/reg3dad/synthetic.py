"""Synthetic prototypes, one-side scans and labelled defects.

Shapes are implicit or parametric surfaces sampled at uniform area density with
analytic normals. Test scans keep only surface points facing the viewer, add
Gaussian noise and apply a random pose; defects are injected before the scan so
their labels are exact.
"""

from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes

from .cloud import PointCloud, RigidTransform, apply_transform, bounding_box
from .dataio import DatasetIndex, MAX_PROTOTYPES, load_dataset, write_labels_txt, write_ply, _atomic_write

log = logging.getLogger(__name__)

FAMILIES = ("sphere", "torus", "superellipsoid", "capsule", "blended-union")
INCOMPLETENESS = "incompleteness"
REDUNDANCY = "redundancy"
DEFECT_SUFFIX = {INCOMPLETENESS: "missing", REDUNDANCY: "bulge"}

DEFAULT_BLOBS = (
    ((0.0, 0.0, 0.0), 9.0),
    ((10.0, 3.0, 1.0), 6.5),
    ((-4.0, 9.0, -2.0), 5.5),
    ((3.0, -5.0, 8.0), 4.5),
)

DEFAULT_SHAPE_PARAMS = {
    "sphere": {"radius": 15.0},
    "torus": {"major_radius": 12.0, "minor_radius": 5.0},
    "superellipsoid": {"a": 14.0, "b": 10.0, "c": 8.0, "e1": 0.5, "e2": 0.7},
    "capsule": {"radius": 6.0, "length": 20.0},
    "blended-union": {"blobs": [[list(c), r] for c, r in DEFAULT_BLOBS], "smoothness": 1.5},
}


@dataclass
class ShapeSpec:
    family: str
    params: dict = field(default_factory=dict)
    n_points: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}; expected one of {FAMILIES}")
        if self.n_points < 1000:
            raise ValueError("shape specs need at least 1000 surface samples")
        merged = json.loads(json.dumps(DEFAULT_SHAPE_PARAMS[self.family]))
        merged.update(self.params)
        self.params = merged
        for key, val in merged.items():
            if isinstance(val, (int, float)) and key not in ("e1", "e2") and val <= 0:
                raise ValueError(f"shape parameter {key} must be positive")


@dataclass
class DefectSpec:
    kind: str
    radius: float
    magnitude: float = 0.0
    center: object = None            # None -> seeded surface point; int -> point index; 3-vector -> location
    facing: object = None            # optional view direction; centres are drawn among points facing it
    rim_width_factor: float = 0.25
    target_anomaly_ratio: float | None = None

    def __post_init__(self):
        if self.kind not in (INCOMPLETENESS, REDUNDANCY):
            raise ValueError(f"unknown defect kind {self.kind!r}")
        if not self.radius > 0:
            raise ValueError("defect radius must be positive")
        if self.magnitude < 0:
            raise ValueError("defect magnitude must be non-negative")


# -- implicit surfaces -------------------------------------------------------

def _blend_eval(x, params):
    k = float(params["smoothness"])
    centers = np.array([b[0] for b in params["blobs"]], dtype=float)
    radii = np.array([b[1] for b in params["blobs"]], dtype=float)
    diff = x[:, None, :] - centers[None]
    dist = np.linalg.norm(diff, axis=2)
    sdf = dist - radii
    z = -sdf / k
    zmax = z.max(axis=1, keepdims=True)
    w = np.exp(z - zmax)
    total = w.sum(axis=1, keepdims=True)
    value = -k * (zmax[:, 0] + np.log(total[:, 0]))
    w /= total
    grad = np.einsum("nb,nbj->nj", w, diff / np.maximum(dist, 1e-12)[..., None])
    return value, grad


def _superellipsoid_eval(x, params):
    a, b, c = params["a"], params["b"], params["c"]
    e1, e2 = params["e1"], params["e2"]
    p, q = 2.0 / e2, 2.0 / e1
    ux, uy, uz = np.abs(x[:, 0] / a), np.abs(x[:, 1] / b), np.abs(x[:, 2] / c)
    A = ux ** p + uy ** p
    Ae = np.maximum(A, 1e-300) ** (e2 / e1 - 1.0)
    value = np.maximum(A, 0) ** (e2 / e1) + uz ** q - 1.0
    gx = (e2 / e1) * Ae * p * ux ** (p - 1) * np.sign(x[:, 0]) / a
    gy = (e2 / e1) * Ae * p * uy ** (p - 1) * np.sign(x[:, 1]) / b
    gz = q * uz ** (q - 1) * np.sign(x[:, 2]) / c
    return value, np.column_stack([gx, gy, gz])


_IMPLICIT = {"blended-union": _blend_eval, "superellipsoid": _superellipsoid_eval}


def _implicit_bounds(family, params):
    if family == "superellipsoid":
        ext = np.array([params["a"], params["b"], params["c"]], dtype=float)
        return -ext, ext
    centers = np.array([b[0] for b in params["blobs"]], dtype=float)
    radii = np.array([b[1] for b in params["blobs"]], dtype=float)
    pad = radii[:, None] + 2.0 * float(params["smoothness"])
    return (centers - pad).min(axis=0), (centers + pad).max(axis=0)


@functools.lru_cache(maxsize=16)
def _implicit_mesh(family, params_json, resolution=112):
    params = json.loads(params_json)
    fn = _IMPLICIT[family]
    lo, hi = _implicit_bounds(family, params)
    span = hi - lo
    lo, hi = lo - 0.08 * span, hi + 0.08 * span
    step = float((hi - lo).max() / resolution)
    axes = [np.arange(lo[i], hi[i] + step, step) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vals, _ = fn(grid.reshape(-1, 3), params)
    verts, faces, _, _ = marching_cubes(vals.reshape(grid.shape[:3]), level=0.0, spacing=(step,) * 3)
    verts = verts + lo
    tri = verts[faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    return tri, areas


def _project(x, fn, params, iters=8):
    for _ in range(iters):
        val, grad = fn(x, params)
        g2 = np.einsum("ij,ij->i", grad, grad)
        x = x - (val / np.maximum(g2, 1e-300))[:, None] * grad
    _, grad = fn(x, params)
    return x, grad / np.linalg.norm(grad, axis=1, keepdims=True)


def _sample_implicit(spec, rng):
    tri, areas = _implicit_mesh(spec.family, json.dumps(spec.params, sort_keys=True))
    face = rng.choice(len(tri), size=spec.n_points, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(spec.n_points))
    r2 = rng.random(spec.n_points)
    t = tri[face]
    x = (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]
    return _project(x, _IMPLICIT[spec.family], spec.params)


def _sample_sphere(spec, rng):
    n = rng.normal(size=(spec.n_points, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return spec.params["radius"] * n, n


def _sample_torus(spec, rng):
    big, small = spec.params["major_radius"], spec.params["minor_radius"]
    theta = np.empty(0)
    while len(theta) < spec.n_points:
        cand = rng.uniform(0, 2 * np.pi, size=2 * spec.n_points)
        keep = rng.random(len(cand)) < (big + small * np.cos(cand)) / (big + small)
        theta = np.concatenate([theta, cand[keep]])
    theta = theta[:spec.n_points]
    phi = rng.uniform(0, 2 * np.pi, size=spec.n_points)
    ring = big + small * np.cos(theta)
    pts = np.column_stack([ring * np.cos(phi), ring * np.sin(phi), small * np.sin(theta)])
    nrm = np.column_stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), np.sin(theta)])
    return pts, nrm


def _sample_capsule(spec, rng):
    r, length = spec.params["radius"], spec.params["length"]
    n = spec.n_points
    cyl_area, cap_area = 2 * np.pi * r * length, 4 * np.pi * r * r
    on_cyl = rng.random(n) < cyl_area / (cyl_area + cap_area)
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    m = int(on_cyl.sum())
    phi = rng.uniform(0, 2 * np.pi, size=m)
    z = rng.uniform(-length / 2, length / 2, size=m)
    nrm[on_cyl] = np.column_stack([np.cos(phi), np.sin(phi), np.zeros(m)])
    pts[on_cyl] = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    k = n - m
    u = rng.normal(size=(k, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    offset = np.where(u[:, 2:3] >= 0, 1.0, -1.0) * np.array([0.0, 0.0, length / 2])
    nrm[~on_cyl] = u
    pts[~on_cyl] = r * u + offset
    return pts, nrm


_SAMPLERS = {
    "sphere": _sample_sphere,
    "torus": _sample_torus,
    "capsule": _sample_capsule,
    "superellipsoid": _sample_implicit,
    "blended-union": _sample_implicit,
}


def make_prototype(spec: ShapeSpec) -> PointCloud:
    """Uniform-density sampling of the full closed surface, with outward normals."""
    rng = np.random.default_rng(spec.seed)
    pts, nrm = _SAMPLERS[spec.family](spec, rng)
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, nrm)


# -- scanning ----------------------------------------------------------------

def random_rotation(rng) -> np.ndarray:
    """Uniform random rotation from a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    u, _, vt = np.linalg.svd(rot)
    return u @ vt


def random_pose(rng, translation_radius: float) -> RigidTransform:
    rot = random_rotation(rng)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    dist = translation_radius * rng.random() ** (1.0 / 3.0)
    return RigidTransform(rot, direction * dist)


def random_direction(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def visible_mask(normals, view_dir, cull_angle_deg=80.0):
    return normals @ np.asarray(view_dir, dtype=float) < -math.cos(math.radians(cull_angle_deg))


def simulate_single_side_scan(cloud: PointCloud, view_dir, noise_sigma_mm: float = 0.011,
                              pose: RigidTransform | None = None, cull_angle_deg: float = 80.0,
                              seed=0) -> PointCloud:
    """Keep viewer-facing points, add isotropic noise, then apply `pose`."""
    if cloud.normals is None:
        raise ValueError("scan simulation needs normals")
    view = np.asarray(view_dir, dtype=np.float64)
    if abs(np.linalg.norm(view) - 1.0) > 1e-6:
        raise ValueError("view_dir must be a unit vector")
    keep = np.nonzero(visible_mask(cloud.normals, view, cull_angle_deg))[0]
    if len(keep) == 0:
        raise ValueError(f"no surface point faces the viewer along view_dir {view.tolist()}")
    scan = cloud.select(keep)
    if noise_sigma_mm > 0:
        rng = np.random.default_rng(seed)
        noisy = scan.points + rng.normal(scale=noise_sigma_mm, size=scan.points.shape)
        scan = PointCloud(noisy, scan.normals, scan.labels)
    if pose is not None:
        scan = apply_transform(scan, pose)
    return scan


# -- defects -----------------------------------------------------------------

def _falloff(t):
    """1 on the inner half of the region, smooth Hermite descent to 0 at the rim."""
    s = np.clip((t - 0.5) / 0.5, 0.0, 1.0)
    return np.where(t < 1.0, 1.0 - (3 * s * s - 2 * s * s * s), 0.0)


def _defect_center(cloud, spec, rng):
    if spec.center is None:
        pool = np.arange(len(cloud))
        if spec.facing is not None and cloud.normals is not None:
            facing = np.nonzero(cloud.normals @ np.asarray(spec.facing, dtype=float) < -0.5)[0]
            pool = facing if len(facing) else pool
        return cloud.points[rng.choice(pool)]
    if np.ndim(spec.center) == 0:
        return cloud.points[int(spec.center)]
    return np.asarray(spec.center, dtype=float)


def inject_defect(cloud: PointCloud, spec: DefectSpec, seed=0):
    """Apply an incompleteness or redundancy defect.

    Returns:
        (defective cloud with labels, labels, info dict with the achieved ratio).
    """
    rng = np.random.default_rng(seed)
    center = _defect_center(cloud, spec, rng)
    dist = np.linalg.norm(cloud.points - center, axis=1)
    base = np.zeros(len(cloud), dtype=np.uint8) if cloud.labels is None else cloud.labels.copy()
    info = {"kind": spec.kind, "center": center.tolist(), "radius": float(spec.radius),
            "magnitude": float(spec.magnitude)}
    inside = dist < spec.radius
    if not inside.any():
        raise ValueError(f"defect region of radius {spec.radius} at {center.tolist()} misses the surface")
    if spec.kind == INCOMPLETENESS:
        keep = ~inside
        rim = keep & (dist < spec.radius * (1.0 + spec.rim_width_factor))
        labels = np.maximum(base, rim.astype(np.uint8))[keep]
        out = PointCloud(cloud.points[keep], None if cloud.normals is None else cloud.normals[keep], labels)
        info["removed"] = int(inside.sum())
    else:
        if cloud.normals is None:
            raise ValueError("redundancy defects need normals")
        shift = spec.magnitude * _falloff(dist / spec.radius)
        moved = shift > 0
        pts = cloud.points + cloud.normals * shift[:, None]
        labels = np.maximum(base, moved.astype(np.uint8))
        out = PointCloud(pts, cloud.normals, labels)
        info["removed"] = 0
    info["labeled"] = int(out.labels.sum())
    info["ratio"] = float(out.labels.mean()) if len(out) else 0.0
    return out, out.labels, info


def _scan_ratio(cloud, spec, seed, view_dir, cull_angle_deg):
    out, _, _ = inject_defect(cloud, spec, seed)
    vis = visible_mask(out.normals, view_dir, cull_angle_deg)
    return float(out.labels[vis].mean()) if vis.any() else 0.0


def tune_defect_radius(cloud, spec, seed, view_dir, cull_angle_deg, target, r_max, iters=40,
                       ceiling=None):
    """Bisect the defect radius so the visible anomaly ratio approaches `target`.

    The smallest radius reaching `target` is returned, unless its ratio lands
    above `ceiling`, in which case the largest radius staying below is used.
    """
    lo, hi = 1e-3 * r_max, r_max
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        trial = DefectSpec(**{**asdict(spec), "radius": mid})
        if _scan_ratio(cloud, trial, seed, view_dir, cull_angle_deg) < target:
            lo = mid
        else:
            hi = mid
    if ceiling is not None:
        trial = DefectSpec(**{**asdict(spec), "radius": hi})
        if _scan_ratio(cloud, trial, seed, view_dir, cull_angle_deg) > ceiling:
            return lo
    return hi


# -- suites ------------------------------------------------------------------

DEFAULT_SUITE = {
    "master_seed": 2023,
    "points_per_prototype": 16000,
    "noise_sigma_mm": 0.05,
    "cull_angle_deg": 80.0,
    "translation_ball_factor": 0.5,
    "defect": {
        "kinds": [REDUNDANCY, INCOMPLETENESS],
        "magnitude_noise_multiple": 20.0,
        "magnitude_mm": None,
        "target_ratio_range": [0.0118, 0.0541],
        "rim_width_factor": 0.25,
    },
    "categories": [
        {"name": "blob", "shape": {"family": "blended-union"}, "n_prototypes": 4, "n_normal": 10, "n_abnormal": 10},
        {"name": "pebble", "shape": {"family": "superellipsoid"}, "n_prototypes": 4, "n_normal": 10, "n_abnormal": 10},
        {"name": "ring", "shape": {"family": "torus"}, "n_prototypes": 4, "n_normal": 10, "n_abnormal": 10},
    ],
}


def merge_suite_config(overrides: dict | None = None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_SUITE))
    for key, val in (overrides or {}).items():
        if key == "defect":
            cfg["defect"].update(val)
        else:
            cfg[key] = val
    return cfg


def full_scale_config() -> dict:
    """12 categories x (4 prototypes, 50 normal, 50 abnormal scans)."""
    families = ["blended-union", "superellipsoid", "torus", "capsule", "sphere"]
    cats = []
    for i in range(12):
        fam = families[i % len(families)]
        cats.append({"name": f"cat{i:02d}_{fam.replace('-', '_')}", "shape": {"family": fam},
                     "n_prototypes": 4, "n_normal": 50, "n_abnormal": 50})
    return merge_suite_config({"categories": cats})


def _rng(master, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(master), *keys]))


def _seed(rng) -> int:
    return int(rng.integers(0, 2**31 - 1))


def generate_suite(suite_config: dict | None, out_root) -> DatasetIndex:
    """Write a full synthetic dataset in the cloud-io layout.

    Also writes ``suite_report.json`` with the achieved anomaly ratio, pose and
    view direction of every test sample.
    """
    cfg = merge_suite_config(suite_config)
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    master = cfg["master_seed"]
    dcfg = cfg["defect"]
    noise = float(cfg["noise_sigma_mm"])
    magnitude = dcfg.get("magnitude_mm")
    if magnitude is None:
        magnitude = float(dcfg["magnitude_noise_multiple"]) * noise
    report = {"config": cfg, "defect_magnitude_mm": magnitude, "categories": {}}
    for ci, cat in enumerate(cfg["categories"]):
        n_proto = int(cat.get("n_prototypes", 4))
        if not 1 <= n_proto <= MAX_PROTOTYPES:
            raise ValueError(f"category {cat['name']}: 1-{MAX_PROTOTYPES} prototypes allowed, got {n_proto}")
        shape = dict(cat["shape"])
        family = shape.pop("family")
        n_points = int(cat.get("points_per_prototype", cfg["points_per_prototype"]))
        base = _rng(master, ci, 0)
        seeds = [_seed(base) for _ in range(n_proto)]
        cdir = out_root / cat["name"]
        for sub in ("train", "test", "gt"):
            (cdir / sub).mkdir(parents=True, exist_ok=True)
        protos = []
        for pi, s in enumerate(seeds):
            proto = make_prototype(ShapeSpec(family, shape, n_points, s))
            protos.append(proto)
            write_ply(proto, cdir / "train" / f"proto_{pi}.ply")
        diag = bounding_box(protos[0]).diagonal
        samples = []
        n_normal, n_abnormal = int(cat.get("n_normal", 10)), int(cat.get("n_abnormal", 10))
        kinds = dcfg["kinds"]
        for j in range(n_normal + n_abnormal):
            rng = _rng(master, ci, 1, j)
            surface = make_prototype(ShapeSpec(family, shape, n_points, _seed(rng)))
            view = random_direction(rng)
            pose = random_pose(rng, cfg["translation_ball_factor"] * diag)
            scan_seed = _seed(rng)
            entry = {"view_dir": view.tolist(), "rotation": pose.rotation.tolist(),
                     "translation": pose.translation.tolist()}
            if j < n_normal:
                stem = f"{j:03d}_good"
                labelled = surface.with_labels(np.zeros(len(surface), dtype=np.uint8))
                entry.update(kind="good", ratio=0.0)
            else:
                kind = kinds[(j - n_normal) % len(kinds)]
                stem = f"{j:03d}_{DEFECT_SUFFIX[kind]}"
                lo, hi = dcfg["target_ratio_range"]
                target = float(rng.uniform(lo, hi))
                defect_seed = _seed(rng)
                spec = DefectSpec(kind, radius=1.0, magnitude=magnitude, facing=view,
                                  rim_width_factor=dcfg["rim_width_factor"])
                radius = tune_defect_radius(surface, spec, defect_seed, view, cfg["cull_angle_deg"],
                                            target, r_max=0.5 * diag, ceiling=hi)
                spec.radius = radius
                labelled, _, info = inject_defect(surface, spec, defect_seed)
                entry.update(kind=kind, target_ratio=target, radius=radius, magnitude=magnitude,
                             center=info["center"])
            scan = simulate_single_side_scan(labelled, view, noise, pose, cfg["cull_angle_deg"], scan_seed)
            scan = PointCloud(scan.points, None, scan.labels)
            write_ply(scan, cdir / "test" / f"{stem}.ply")
            if j >= n_normal:
                write_labels_txt(cdir / "gt" / f"{stem}.txt", scan.points, scan.labels)
                entry["ratio"] = float(scan.labels.mean())
            entry.update(name=stem, n_points=len(scan), visible_fraction=len(scan) / len(labelled))
            samples.append(entry)
        report["categories"][cat["name"]] = {
            "family": family, "n_prototypes": n_proto, "prototype_seeds": seeds,
            "bbox_diagonal_mm": diag, "samples": samples,
        }
    _atomic_write(out_root / "suite_report.json",
                  (json.dumps(report, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return load_dataset(out_root)
