import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgsurf.errors import AlignmentError, InputError
from sgsurf.geometry import (
    Intrinsics, Pose, Similarity, align_poses, align_similarity, apply_delta, compose, look_at,
    matrix_to_quat, pixel_to_ray, project, quat_to_matrix, random_rotation_quat, ray_pose_gradient,
    relative_angle_deg, rotation_about, rotation_angle_between,
)


def random_pose(rng, spread=3.0):
    q = rng.normal(size=4)
    return Pose(q / np.linalg.norm(q), rng.normal(scale=spread, size=3))


def homogeneous(p: Pose):
    return p.matrix()


@pytest.fixture
def intr():
    return Intrinsics(fx=120.0, fy=110.0, cx=64.0, cy=48.0, width=128, height=96)


seeds = st.integers(min_value=0, max_value=2**31 - 1)


class TestPose:
    def test_quaternion_is_normalized(self):
        p = Pose(np.array([2.0, 0.0, 0.0, 0.0]), np.zeros(3))
        assert np.linalg.norm(p.rotation) == pytest.approx(1.0, abs=1e-12)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(InputError):
            Pose(np.zeros(4), np.zeros(3))

    def test_compose_identity(self):
        p = random_pose(np.random.default_rng(0))
        assert compose(Pose.identity(), p).allclose(p)

    def test_compose_with_inverse(self):
        p = random_pose(np.random.default_rng(1))
        assert compose(p, p.inverse()).allclose(Pose.identity(), atol=1e-9)
        assert compose(p.inverse(), p).allclose(Pose.identity(), atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(seeds)
    def test_compose_matches_matrix_product(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_pose(rng), random_pose(rng)
        x = rng.normal(size=3)
        expected = (homogeneous(a) @ homogeneous(b) @ np.append(x, 1.0))[:3]
        np.testing.assert_allclose(compose(a, b).apply(x), expected, atol=1e-9)
        assert np.linalg.norm(compose(a, b).rotation) == pytest.approx(1.0, abs=1e-9)

    def test_matrix_quaternion_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            p = random_pose(rng)
            np.testing.assert_allclose(quat_to_matrix(matrix_to_quat(p.R)), p.R, atol=1e-12)

    def test_delta_keeps_unit_norm(self):
        rng = np.random.default_rng(3)
        p = random_pose(rng)
        for _ in range(1000):
            p = apply_delta(p, rng.normal(scale=0.1, size=6))
        assert abs(np.linalg.norm(p.rotation) - 1.0) < 1e-9


class TestAngles:
    def test_identical(self):
        p = random_pose(np.random.default_rng(0))
        assert rotation_angle_between(p, p) == pytest.approx(0.0, abs=1e-6)

    def test_quarter_turn(self):
        p = Pose.identity()
        q = Pose(rotation_about([0, 0, 1], 90.0), np.zeros(3))
        assert rotation_angle_between(p, q) == pytest.approx(90.0, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_matches_trace_formula(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_pose(rng), random_pose(rng)
        cos = np.clip((np.trace(a.R.T @ b.R) - 1) / 2, -1, 1)
        expected = np.degrees(np.arccos(cos))
        got = rotation_angle_between(a, b)
        assert 0.0 <= got <= 180.0
        assert got == pytest.approx(expected, abs=1e-6)

    def test_sign_of_quaternion_is_irrelevant(self):
        q = rotation_about([1, 2, 3], 170.0)
        assert relative_angle_deg(q, -q) == pytest.approx(0.0, abs=1e-9)


class TestProjection:
    def test_optical_axis(self, intr):
        ray = pixel_to_ray(Pose.identity(), intr, (intr.cx, intr.cy))
        np.testing.assert_allclose(ray.direction, [0, 0, 1], atol=1e-12)

    def test_unit_tangent_offset(self):
        intr = Intrinsics(fx=40.0, fy=40.0, cx=32.0, cy=32.0, width=128, height=64)
        ray = pixel_to_ray(Pose.identity(), intr, (intr.cx + intr.fx, intr.cy))
        np.testing.assert_allclose(ray.direction, np.array([1.0, 0, 1]) / np.sqrt(2), atol=1e-12)

    def test_out_of_bounds_pixel(self, intr):
        with pytest.raises(InputError):
            pixel_to_ray(Pose.identity(), intr, (-1.0, 10.0))
        with pytest.raises(InputError):
            pixel_to_ray(Pose.identity(), intr, (10.0, intr.height))

    def test_point_on_axis(self, intr):
        proj = project(Pose.identity(), intr, [0.0, 0.0, 1.0])
        assert (proj.u, proj.v, proj.behind) == (intr.cx, intr.cy, False)

    def test_behind_camera_flagged(self, intr):
        assert project(Pose.identity(), intr, [0.0, 0.0, -1.0]).behind

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_unproject_project_round_trip(self, seed):
        intr = Intrinsics(fx=120.0, fy=110.0, cx=64.0, cy=48.0, width=128, height=96)
        rng = np.random.default_rng(seed)
        pose = random_pose(rng)
        uv = rng.uniform([-0.5, -0.5], [127.5, 95.5])
        ray = pixel_to_ray(pose, intr, uv)
        assert np.linalg.norm(ray.direction) == pytest.approx(1.0, abs=1e-9)
        point = ray.origin + rng.uniform(0.1, 10.0) * ray.direction
        proj = project(pose, intr, point)
        assert not proj.behind
        np.testing.assert_allclose([proj.u, proj.v], uv, atol=1e-6)

    def test_intrinsics_validation(self):
        with pytest.raises(InputError):
            Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
        with pytest.raises(InputError):
            Intrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)


class TestLookAt:
    def test_axis_points_at_target(self):
        pose = look_at([2.0, 1.0, 1.5], target=[0.1, -0.2, 0.3])
        forward = pose.R[:, 2]
        to_target = np.array([0.1, -0.2, 0.3]) - pose.center
        np.testing.assert_allclose(forward, to_target / np.linalg.norm(to_target), atol=1e-12)
        assert np.linalg.det(pose.R) == pytest.approx(1.0)

    def test_image_up_is_world_up(self):
        pose = look_at([3.0, 0.0, 0.0])
        # image "down" axis points against world +z
        assert pose.R[:, 1] @ np.array([0, 0, 1.0]) < 0


def random_similarity(rng):
    return Similarity(float(rng.uniform(0.2, 5.0)), random_rotation_quat(rng, 180.0), rng.normal(size=3))


class TestAlignment:
    def test_recovers_exact_similarity(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            gt = [random_pose(rng) for _ in range(8)]
            sim = random_similarity(rng)
            est = [sim.inverse().apply_to_pose(p) for p in gt]
            fit = align_poses(est, gt)
            np.testing.assert_allclose(fit.matrix(), sim.matrix(), atol=1e-7)

    def test_mask_ignores_outliers(self):
        rng = np.random.default_rng(1)
        gt = [random_pose(rng) for _ in range(8)]
        sim = random_similarity(rng)
        est = [sim.inverse().apply_to_pose(p) for p in gt]
        est[2] = Pose(est[2].rotation, est[2].translation + 5.0)
        mask = np.ones(8, dtype=bool)
        mask[2] = False
        np.testing.assert_allclose(align_poses(est, gt, mask).matrix(), sim.matrix(), atol=1e-7)

    def test_similarity_inverse(self):
        rng = np.random.default_rng(2)
        sim = random_similarity(rng)
        x = rng.normal(size=(10, 3))
        np.testing.assert_allclose(sim.inverse().apply(sim.apply(x)), x, atol=1e-7)

    def test_too_few_points(self):
        rng = np.random.default_rng(3)
        c = rng.normal(size=(2, 3))
        R = np.stack([np.eye(3)] * 2)
        with pytest.raises(AlignmentError):
            align_similarity(c, c, R, R)

    def test_collinear_points(self):
        c = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        R = np.stack([np.eye(3)] * 5)
        with pytest.raises(AlignmentError):
            align_similarity(c, c, R, R)

    def test_noisy_alignment_close(self):
        rng = np.random.default_rng(4)
        gt = [random_pose(rng) for _ in range(20)]
        sim = random_similarity(rng)
        est = [apply_delta(sim.inverse().apply_to_pose(p), rng.normal(scale=1e-4, size=6)) for p in gt]
        fit = align_poses(est, gt)
        assert fit.scale == pytest.approx(sim.scale, rel=1e-3)


class TestPoseGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        pose = random_pose(rng)
        intr = Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
        uv = rng.uniform(0, 99, size=(5, 2))
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))

        def loss(p):
            from sgsurf.geometry import camera_directions
            d = camera_directions(intr, uv) @ p.R.T
            o = np.broadcast_to(p.translation, d.shape)
            return float((a * o).sum() + (b * d).sum())

        from sgsurf.geometry import camera_directions
        dirs = camera_directions(intr, uv) @ pose.R.T
        grad = ray_pose_gradient(dirs, a, b, np.zeros(5, dtype=int), 1)[0]
        h = 1e-6
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            num = (loss(apply_delta(pose, e)) - loss(apply_delta(pose, -e))) / (2 * h)
            assert grad[k] == pytest.approx(num, rel=1e-5, abs=1e-8)
