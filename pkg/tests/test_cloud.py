import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reg3dad.cloud import (
    PointCloud, RigidTransform, apply_transform, bounding_box, estimate_normals, mean_spacing,
    random_subsample, voxel_downsample,
)
from reg3dad.synthetic import random_rotation


def random_transform(rng, scale=10.0):
    return RigidTransform(random_rotation(rng), rng.uniform(-scale, scale, 3))


class TestPointCloud:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            PointCloud([[0.0, np.nan, 0.0]])

    def test_rejects_non_unit_normals(self):
        with pytest.raises(ValueError):
            PointCloud([[0, 0, 0]], [[0, 0, 2.0]])

    def test_rejects_non_binary_labels(self):
        with pytest.raises(ValueError):
            PointCloud([[0, 0, 0]], labels=[2])

    def test_arrays_are_read_only(self):
        c = PointCloud(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            c.points[0, 0] = 1.0

    def test_select_keeps_payload(self):
        c = PointCloud(np.arange(9.0).reshape(3, 3), np.tile([0, 0, 1.0], (3, 1)), [0, 1, 0])
        s = c.select([2, 1])
        assert np.array_equal(s.points, c.points[[2, 1]])
        assert list(s.labels) == [0, 1]


class TestRigidTransform:
    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]))

    def test_inverse_and_compose(self, rng):
        t = random_transform(rng)
        both = t.compose(t.inverse())
        assert np.allclose(both.matrix(), np.eye(4), atol=1e-12)

    def test_compose_order(self, rng):
        a, b = random_transform(rng), random_transform(rng)
        p = rng.normal(size=(5, 3))
        assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)))

    def test_matrix_round_trip(self, rng):
        t = random_transform(rng)
        assert np.allclose(RigidTransform.from_matrix(t.matrix()).matrix(), t.matrix())


class TestApplyTransform:
    def test_identity(self, sphere):
        out = apply_transform(sphere, RigidTransform.identity())
        assert np.array_equal(out.points, sphere.points)
        assert np.allclose(out.normals, sphere.normals)

    def test_axis_rotation(self):
        rz = RigidTransform([[0, -1, 0], [1, 0, 0], [0, 0, 1]])
        out = apply_transform(PointCloud([[1.0, 0, 0]]), rz)
        assert np.allclose(out.points, [[0, 1, 0]], atol=1e-15)

    def test_inverse_restores(self, rng):
        pts = rng.normal(size=(100, 3)) * 10
        t = random_transform(rng)
        back = apply_transform(apply_transform(PointCloud(pts), t), t.inverse())
        assert np.max(np.abs(back.points - pts)) < 1e-9

    def test_preserves_distances(self, rng):
        pts = rng.normal(size=(50, 3)) * 20
        out = apply_transform(PointCloud(pts), random_transform(rng)).points
        d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
        assert np.allclose(d0, d1, rtol=1e-9, atol=1e-12)


class TestBoundingBox:
    def test_single_point(self):
        box = bounding_box(PointCloud([[1.0, 2, 3]]))
        assert np.array_equal(box.min, box.max)

    def test_two_points(self):
        box = bounding_box(PointCloud([[0.0, 0, 0], [1, 2, 3]]))
        assert np.array_equal(box.min, [0, 0, 0]) and np.array_equal(box.max, [1, 2, 3])

    def test_unit_sphere_diagonal(self, rng):
        v = rng.normal(size=(10000, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        assert abs(bounding_box(PointCloud(v)).diagonal - 2 * math.sqrt(3)) < 0.02 * 2 * math.sqrt(3)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            bounding_box(PointCloud(np.zeros((0, 3))))


class TestVoxelDownsample:
    def test_two_points_merge(self):
        out, idx = voxel_downsample(PointCloud([[0.0, 0, 0], [0.1, 0, 0]]), 1.0)
        assert len(out) == 1 and np.allclose(out.points[0], [0.05, 0, 0])
        assert list(idx) == [0, 0]

    def test_grid_unchanged(self, grid_cloud):
        out, _ = voxel_downsample(grid_cloud, 0.5)
        assert len(out) == len(grid_cloud)
        key = lambda p: np.lexsort(p.T[::-1])  # noqa: E731
        assert np.allclose(out.points[key(out.points)], grid_cloud.points[key(grid_cloud.points)])

    def test_labels_reduce_by_max(self):
        out, _ = voxel_downsample(PointCloud([[0.0, 0, 0], [0.1, 0, 0]], labels=[0, 1]), 1.0)
        assert out.labels[0] == 1

    def test_idempotent(self, sphere):
        once, _ = voxel_downsample(sphere, 1.0)
        twice, _ = voxel_downsample(once, 1.0)
        assert len(twice) == len(once)
        assert np.allclose(np.sort(twice.points, axis=0), np.sort(once.points, axis=0))

    @given(st.integers(1, 200), st.floats(0.05, 5.0))
    @settings(max_examples=30, deadline=None)
    def test_never_grows(self, n, voxel):
        pts = np.random.default_rng(n).uniform(-3, 3, size=(n, 3))
        out, idx = voxel_downsample(PointCloud(pts), voxel)
        assert len(out) <= n and idx.max() == len(out) - 1


class TestRandomSubsample:
    def test_ratio_one_is_identity(self, sphere):
        out, kept = random_subsample(sphere, 1)
        assert np.array_equal(kept, np.arange(len(sphere)))

    def test_ratio_500_of_1000_keeps_two(self):
        out, _ = random_subsample(PointCloud(np.zeros((1000, 3))), 500)
        assert len(out) == 2

    def test_deterministic(self, sphere):
        _, a = random_subsample(sphere, 7, seed=3)
        _, b = random_subsample(sphere, 7, seed=3)
        assert np.array_equal(a, b)

    @given(st.integers(1, 3000), st.integers(1, 600))
    @settings(max_examples=60, deadline=None)
    def test_exact_count(self, n, r):
        out, kept = random_subsample(PointCloud(np.zeros((n, 3))), r, seed=1)
        assert len(out) == math.ceil(n / r)
        assert np.all(np.diff(kept) > 0)


class TestEstimateNormals:
    def test_plane(self, grid_cloud):
        out = estimate_normals(PointCloud(grid_cloud.points), 16, (0, 0, 10))
        assert np.max(np.abs(out.normals - [0, 0, 1])) < 1e-6

    def test_sphere_inward(self, rng):
        v = rng.normal(size=(3000, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        out = estimate_normals(PointCloud(v), 16, (0, 0, 0))
        cos = np.einsum("ij,ij->i", out.normals, -v)
        assert np.all(cos > math.cos(math.radians(5)))

    def test_three_points(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 1]])
        n = estimate_normals(PointCloud(pts), 3, (0, 0, 5)).normals[0]
        assert abs(n @ (pts[1] - pts[0])) < 1e-9 and abs(n @ (pts[2] - pts[0])) < 1e-9

    def test_collinear_flags_fallback(self):
        pts = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
        out, flags = estimate_normals(PointCloud(pts), 4, return_flags=True)
        assert flags.all() and np.allclose(out.normals, [0, 0, 1])

    def test_rigid_equivariance(self, sphere, rng):
        t = random_transform(rng)
        base = estimate_normals(PointCloud(sphere.points), 16, (0, 0, 0))
        moved = estimate_normals(PointCloud(t.apply(sphere.points)), 16, t.apply(np.zeros((1, 3)))[0])
        assert np.max(np.abs(moved.normals - base.normals @ t.rotation.T)) < 1e-6


def test_mean_spacing_grid(grid_cloud):
    assert mean_spacing(grid_cloud.points) == pytest.approx(1.0)
