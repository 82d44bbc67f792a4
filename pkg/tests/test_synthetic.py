import json
import math

import numpy as np
import pytest

from reg3dad.cloud import PointCloud, bounding_box
from reg3dad.dataio import MAX_PROTOTYPES, load_dataset, read_ply
from reg3dad.synthetic import (
    INCOMPLETENESS, REDUNDANCY, DefectSpec, ShapeSpec, generate_suite, inject_defect, make_prototype,
    random_rotation, simulate_single_side_scan,
)


def test_sphere_radius_and_normals(sphere):
    r = np.linalg.norm(sphere.points, axis=1)
    assert np.max(np.abs(r - 15.0)) < 1e-9
    cos = np.einsum("ij,ij->i", sphere.normals, sphere.points / r[:, None])
    assert np.all(cos > math.cos(math.radians(5)))


@pytest.mark.parametrize("family", ["capsule", "superellipsoid", "blended-union"])
def test_families_have_outward_normals(family):
    c = make_prototype(ShapeSpec(family, n_points=3000, seed=1))
    outward = np.einsum("ij,ij->i", c.normals, c.points - c.points.mean(axis=0))
    assert np.mean(outward > 0) > 0.9


def test_torus_normals_leave_the_tube():
    c = make_prototype(ShapeSpec("torus", {"major_radius": 12.0, "minor_radius": 5.0}, 3000, seed=1))
    ring = c.points.copy()
    ring[:, 2] = 0.0
    ring *= 12.0 / np.linalg.norm(ring, axis=1, keepdims=True)
    away = c.points - ring
    assert np.allclose(c.normals, away / np.linalg.norm(away, axis=1, keepdims=True), atol=1e-9)


def test_shape_spec_validation():
    with pytest.raises(ValueError):
        ShapeSpec("cube")
    with pytest.raises(ValueError):
        ShapeSpec("sphere", n_points=10)
    with pytest.raises(ValueError):
        ShapeSpec("sphere", {"radius": -1.0})


def test_prototype_deterministic():
    a = make_prototype(ShapeSpec("blended-union", n_points=2000, seed=7))
    b = make_prototype(ShapeSpec("blended-union", n_points=2000, seed=7))
    assert np.array_equal(a.points, b.points)


def test_random_rotation_is_proper(rng):
    r = random_rotation(rng)
    assert np.allclose(r @ r.T, np.eye(3)) and np.linalg.det(r) == pytest.approx(1.0)


class TestScan:
    def test_sphere_fraction_at_default_cull(self, sphere):
        scan = simulate_single_side_scan(sphere, [0, 0, 1.0], 0.0)
        expected = (1 - math.cos(math.radians(80))) / 2
        assert abs(len(scan) / len(sphere) - expected) < 0.03

    def test_hemisphere_at_ninety_degrees(self, sphere):
        scan = simulate_single_side_scan(sphere, [0, 0, 1.0], 0.0, cull_angle_deg=90.0)
        assert abs(len(scan) / len(sphere) - 0.5) < 0.03
        assert np.all(scan.points[:, 2] < 0)

    def test_subset_without_noise(self, sphere):
        scan = simulate_single_side_scan(sphere, [1.0, 0, 0], 0.0)
        rows = {tuple(p) for p in sphere.points}
        assert all(tuple(p) in rows for p in scan.points)

    def test_edge_on_disk_is_empty(self):
        pts = np.column_stack([np.random.default_rng(0).normal(size=(100, 2)), np.zeros(100)])
        disk = PointCloud(pts, np.tile([0, 0, 1.0], (100, 1)))
        with pytest.raises(ValueError):
            simulate_single_side_scan(disk, [1.0, 0, 0], 0.0)

    def test_noise_level(self, sphere):
        scan = simulate_single_side_scan(sphere, [0, 0, 1.0], 0.5, seed=3)
        r = np.linalg.norm(scan.points, axis=1)
        assert abs(np.std(r - 15.0) - 0.5) < 0.05

    def test_requires_unit_view(self, sphere):
        with pytest.raises(ValueError):
            simulate_single_side_scan(sphere, [0, 0, 2.0])


class TestDefects:
    def test_cap_removal(self, sphere):
        spec = DefectSpec(INCOMPLETENESS, radius=5.0, center=[0, 0, 15.0], rim_width_factor=0.25)
        out, labels, info = inject_defect(sphere, spec)
        # a cap of chord radius 5 on a radius-15 sphere
        h = 5.0 ** 2 / (2 * 15.0)
        expected = h / (2 * 15.0) * len(sphere)
        assert abs(info["removed"] - expected) <= 0.1 * expected
        assert len(out) == len(sphere) - info["removed"] and labels.sum() > 0

    def test_bulge_moves_along_normals(self, sphere):
        spec = DefectSpec(REDUNDANCY, radius=4.0, magnitude=1.0, center=[0, 0, 15.0])
        out, labels, _ = inject_defect(sphere, spec)
        r = np.linalg.norm(out.points, axis=1)
        assert r.max() == pytest.approx(16.0, abs=0.05)
        assert np.all(r[labels == 0] == pytest.approx(15.0))

    def test_zero_magnitude_changes_nothing(self, sphere):
        spec = DefectSpec(REDUNDANCY, radius=4.0, magnitude=0.0, center=0)
        out, labels, _ = inject_defect(sphere, spec)
        assert np.array_equal(out.points, sphere.points) and labels.sum() == 0

    def test_missing_region(self, sphere):
        with pytest.raises(ValueError):
            inject_defect(sphere, DefectSpec(INCOMPLETENESS, radius=1.0, center=[100.0, 0, 0]))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            DefectSpec("scratch", 1.0)
        with pytest.raises(ValueError):
            DefectSpec(INCOMPLETENESS, 0.0)


class TestSuite:
    def test_layout_and_protocol(self, tiny_suite):
        ds = load_dataset(tiny_suite)
        cat = ds.category("blob")
        assert 1 <= len(cat.train_paths) <= MAX_PROTOTYPES
        report = json.loads((tiny_suite / "suite_report.json").read_text())
        for s in report["categories"]["blob"]["samples"]:
            assert s["visible_fraction"] < 0.6
            if s["kind"] != "good":
                assert 0.0118 <= s["ratio"] <= 0.0541

    def test_scans_carry_no_normals(self, tiny_suite):
        cat = load_dataset(tiny_suite).category("blob")
        assert read_ply(cat.test_paths[0]).normals is None

    def test_deterministic(self, tiny_suite, tmp_path):
        cfg = json.loads((tiny_suite / "suite_report.json").read_text())["config"]
        generate_suite(cfg, tmp_path)
        for name in ("train/proto_0.ply", "test/000_good.ply"):
            assert (tmp_path / "blob" / name).read_bytes() == (tiny_suite / "blob" / name).read_bytes()

    def test_too_many_prototypes(self, tmp_path):
        cfg = {"categories": [{"name": "x", "shape": {"family": "sphere"}, "n_prototypes": 5}]}
        with pytest.raises(ValueError):
            generate_suite(cfg, tmp_path)

    def test_prototype_diagonal_scale(self, tiny_suite):
        cat = load_dataset(tiny_suite).category("blob")
        assert bounding_box(read_ply(cat.train_paths[0])).diagonal > 10
