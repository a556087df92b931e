import numpy as np
import pytest

from semfuse import (DegenerateGeometryError, Intrinsics, LabeledCloud,
                     RigidTransform, UNLABELED, View, apply_transform, project,
                     solve_rigid, unproject)

from conftest import random_cloud, random_transform


def make_view(depth, labels=None, color=None, fx=100.0, fy=100.0, cx=None, cy=None):
    h, w = depth.shape
    if labels is None:
        labels = np.zeros((h, w), dtype=np.int64)
    if color is None:
        color = np.full((h, w, 3), 0.5)
    intr = Intrinsics(fx, fy, w / 2.0 if cx is None else cx,
                      h / 2.0 if cy is None else cy, w, h)
    return View(color, depth, labels, intr)


class TestIntrinsics:
    def test_rejects_nonpositive_focal(self):
        with pytest.raises(ValueError):
            Intrinsics(0.0, 100.0, 32.0, 24.0, 64, 48)

    def test_rejects_principal_point_outside(self):
        with pytest.raises(ValueError):
            Intrinsics(100.0, 100.0, 64.0, 24.0, 64, 48)


class TestView:
    def test_rejects_mismatched_rasters(self):
        depth = np.ones((4, 4))
        color = np.zeros((4, 5, 3))
        labels = np.zeros((4, 4), dtype=np.int64)
        intr = Intrinsics(10.0, 10.0, 2.0, 2.0, 4, 4)
        with pytest.raises(ValueError, match="color raster"):
            View(color, depth, labels, intr)


class TestUnproject:
    def test_principal_ray(self):
        depth = np.zeros((8, 8))
        depth[4, 4] = 2.0   # pixel at (cx, cy) = (4, 4)
        cloud = unproject(make_view(depth, cx=4.0, cy=4.0))
        assert len(cloud) == 1
        np.testing.assert_allclose(cloud.positions[0], [0.0, 0.0, 2.0])

    def test_unit_tangent(self):
        # pixel (cx + fx, cy) at depth d lands at x = d
        depth = np.zeros((4, 120))
        depth[2, 110] = 1.5
        cloud = unproject(make_view(depth, fx=100.0, fy=100.0, cx=10.0, cy=2.0))
        np.testing.assert_allclose(cloud.positions[0], [1.5, 0.0, 1.5])

    def test_matches_per_pixel_pinhole_table(self, rng):
        # Oracle: evaluate the pinhole formula pixel by pixel in a plain loop.
        depth = rng.uniform(0.5, 3.0, size=(4, 4))
        labels = rng.integers(0, 3, size=(4, 4))
        color = rng.uniform(size=(4, 4, 3))
        view = make_view(depth, labels=labels, color=color, fx=90.0, fy=80.0,
                         cx=1.5, cy=2.5)
        cloud = unproject(view)
        expected = []
        for v in range(4):
            for u in range(4):
                d = depth[v, u]
                expected.append([(u - 1.5) * d / 90.0, (v - 2.5) * d / 80.0, d])
        np.testing.assert_allclose(cloud.positions, expected, atol=1e-12)
        np.testing.assert_array_equal(cloud.labels, labels.ravel())

    def test_skips_invalid_depth_and_unlabeled(self):
        depth = np.array([[1.0, 0.0], [-1.0, 2.0]])
        labels = np.array([[1, 1], [1, UNLABELED]], dtype=np.int64)
        cloud = unproject(make_view(depth, labels=labels))
        assert len(cloud) == 1
        assert cloud.positions[0, 2] == 1.0

    def test_project_round_trip(self, rng):
        depth = rng.uniform(0.5, 3.0, size=(6, 9))
        view = make_view(depth, fx=75.0, fy=85.0)
        cloud = unproject(view)
        uv = project(cloud.positions, view.intrinsics)
        vv, uu = np.meshgrid(np.arange(6), np.arange(9), indexing="ij")
        expected = np.column_stack([uu.ravel(), vv.ravel()])
        np.testing.assert_allclose(uv, expected, atol=1e-6)


class TestApplyTransform:
    def test_identity(self, rng):
        cloud = random_cloud(rng, 50)
        out = apply_transform(cloud, RigidTransform.identity())
        np.testing.assert_array_equal(out.positions, cloud.positions)
        np.testing.assert_array_equal(out.labels, cloud.labels)

    def test_z_rotation(self):
        rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        cloud = LabeledCloud([[1.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]], [0])
        out = apply_transform(cloud, RigidTransform(rz, np.zeros(3)))
        np.testing.assert_allclose(out.positions[0], [0.0, 1.0, 0.0], atol=1e-15)

    def test_inverse_round_trip(self, rng):
        cloud = random_cloud(rng, 100)
        t = random_transform(rng)
        back = apply_transform(apply_transform(cloud, t), t.inverse())
        np.testing.assert_allclose(back.positions, cloud.positions, atol=1e-9)

    def test_isometry(self, rng):
        cloud = random_cloud(rng, 40)
        t = random_transform(rng)
        moved = apply_transform(cloud, t)
        d0 = np.linalg.norm(cloud.positions[:, None] - cloud.positions[None, :], axis=2)
        d1 = np.linalg.norm(moved.positions[:, None] - moved.positions[None, :], axis=2)
        np.testing.assert_allclose(d0, d1, atol=1e-9)


class TestSolveRigid:
    def test_identity_on_equal_points(self, rng):
        pts = rng.normal(size=(20, 3))
        t = solve_rigid(pts, pts)
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(t.translation, 0.0, atol=1e-9)

    def test_pure_translation(self, rng):
        pts = rng.normal(size=(10, 3))
        t = solve_rigid(pts, pts + [1.0, 0.0, 0.0])
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(t.translation, [1.0, 0.0, 0.0], atol=1e-9)

    def test_recovers_random_transform(self, rng):
        pts = rng.normal(size=(100, 3))
        truth = random_transform(rng)
        t = solve_rigid(pts, truth.apply(pts))
        assert np.linalg.norm(t.rotation - truth.rotation) < 1e-9
        assert np.linalg.norm(t.translation - truth.translation) < 1e-9

    def test_too_few_pairs(self):
        with pytest.raises(DegenerateGeometryError):
            solve_rigid(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_collinear_sources(self):
        src = np.outer(np.arange(10.0), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateGeometryError):
            solve_rigid(src, src)

    def test_output_valid_on_noisy_pairs(self, rng):
        for _ in range(20):
            src = rng.normal(size=(30, 3))
            tgt = random_transform(rng).apply(src) + rng.normal(scale=0.1, size=(30, 3))
            t = solve_rigid(src, tgt)   # constructor asserts orthonormality/det
            assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-9

    def test_local_minimum_probe(self, rng):
        src = rng.normal(size=(50, 3))
        tgt = random_transform(rng).apply(src) + rng.normal(scale=0.05, size=(50, 3))
        t = solve_rigid(src, tgt)

        def objective(rot, trans):
            return 0.5 * np.sum((tgt - src @ rot.T - trans) ** 2)

        base = objective(t.rotation, t.translation)
        eps = 1e-4
        for axis in range(3):
            for sign in (-1.0, 1.0):
                dt = np.zeros(3)
                dt[axis] = sign * eps
                assert objective(t.rotation, t.translation + dt) >= base
                axis_vec = np.zeros(3)
                axis_vec[axis] = 1.0
                c, s = np.cos(sign * eps), np.sin(sign * eps)
                k = np.array([[0, -axis_vec[2], axis_vec[1]],
                              [axis_vec[2], 0, -axis_vec[0]],
                              [-axis_vec[1], axis_vec[0], 0]])
                dr = np.eye(3) + s * k + (1 - c) * (k @ k)
                assert objective(dr @ t.rotation, t.translation) >= base
