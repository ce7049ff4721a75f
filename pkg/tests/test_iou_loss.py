import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgsurf.field import RaySample, RenderResult, VoxelField
from sgsurf.geometry import Intrinsics, apply_delta, look_at
from sgsurf.iou_loss import (
    GRID_RES, RayMoG, build_mog, iou_batch, iou_pair, keypoint_iou, rasterize, top_k_indices, voxel_centers,
)


def fake_render(weights, positions=None):
    n = len(weights)
    if positions is None:
        positions = np.stack([np.linspace(-0.5, 0.5, n), np.zeros(n), np.zeros(n)], axis=1)
    samples = [RaySample(float(i), np.asarray(p, dtype=float), 0.0, float(w), np.zeros(3))
               for i, (w, p) in enumerate(zip(weights, positions))]
    return RenderResult(np.ones(3), samples, float(np.sum(weights)))


def voxel_volume(res=GRID_RES):
    return (2.0 / res) ** 3


class TestBuildMoG:
    def test_single_sample(self):
        mog = build_mog(fake_render([1.0], [[0.1, 0.2, 0.3]]))
        assert len(mog.weights) == 1
        assert mog.weights[0] == 1.0
        np.testing.assert_array_equal(mog.means[0], [0.1, 0.2, 0.3])

    def test_normalization_with_zero_tail(self):
        w = np.zeros(64)
        w[[10, 20, 30]] = [0.4, 0.4, 0.2]
        mog = build_mog(fake_render(w))
        assert len(mog.weights) == 8
        assert set(mog.indices[:3]) == {10, 20, 30}
        np.testing.assert_allclose(sorted(mog.weights, reverse=True), [0.4, 0.4, 0.2] + [0.0] * 5)

    def test_all_zero_is_empty(self):
        assert build_mog(fake_render(np.zeros(16))).empty

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_top_k_matches_full_sort(self, seed):
        w = np.random.default_rng(seed).uniform(size=64)
        got = top_k_indices(w)[0]
        want = np.argsort(w)[::-1][:8]
        assert set(got) == set(want)

    def test_ties_prefer_nearer_samples(self):
        w = np.zeros(10)
        w[[2, 7]] = 0.5
        assert list(top_k_indices(w, np.arange(10.0), k=2)[0]) == [2, 7]


class TestRasterize:
    def centered(self, pos):
        return RayMoG(np.array([pos]), np.array([1.0]), np.array([0]))

    def test_argmax_at_component_voxel(self):
        c = voxel_centers()
        pos = [c[0, 20], c[1, 33], c[2, 41]]
        grid = rasterize(self.centered(pos))
        assert np.unravel_index(np.argmax(grid), grid.shape) == (20, 33, 41)

    def test_mass_is_close_to_one(self):
        c = voxel_centers()
        grid = rasterize(self.centered([c[0, 31], c[1, 32], c[2, 30]]))
        assert grid.sum() * voxel_volume() == pytest.approx(1.0, rel=0.05)

    def test_support_is_three_sigma(self):
        c = voxel_centers()
        pos = np.array([c[0, 32], c[1, 32], c[2, 32]])
        grid = rasterize(self.centered(pos))
        nz = np.argwhere(grid > 0)
        dist = np.abs(c[0][nz] - pos).max(axis=1)
        assert dist.max() < 3 * np.sqrt(0.1)

    def test_linearity(self):
        a = self.centered([0.1, -0.2, 0.0])
        b = self.centered([-0.3, 0.2, 0.25])
        both = RayMoG(np.concatenate([a.means, b.means]), np.array([0.5, 0.5]), np.array([0, 1]))
        np.testing.assert_allclose(rasterize(both), 0.5 * (rasterize(a) + rasterize(b)), atol=1e-12)


class TestIoUPair:
    def test_disjoint(self):
        a = np.zeros((4, 4, 4))
        b = np.zeros((4, 4, 4))
        a[0, 0, 0] = 1.0
        b[3, 3, 3] = 1.0
        assert iou_pair(a, b) == 1.0

    def test_single_shared_voxel(self):
        a = np.zeros((4, 4, 4))
        a[1, 2, 3] = 1.0
        assert iou_pair(a, a.copy()) == 0.5

    def test_identical_random_grids(self):
        g = np.random.default_rng(0).uniform(size=(6, 6, 6))
        num = den = 0.0
        for x in g.ravel():
            num += x * x
            den += 2 * x
        assert iou_pair(g, g) == pytest.approx(1 - num / den, abs=1e-9)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_separable_batch_equals_dense_grid(self, seed):
        rng = np.random.default_rng(seed)
        ma, mb = rng.uniform(-0.6, 0.6, size=(2, 1, 8, 3))
        wa, wb = rng.dirichlet(np.ones(8), size=2)[:, None]
        dense = iou_pair(rasterize(RayMoG(ma[0], wa[0], np.arange(8))),
                         rasterize(RayMoG(mb[0], wb[0], np.arange(8))))
        loss = iou_batch(ma, wa, mb, wb)[0]
        assert loss[0] == pytest.approx(dense, abs=1e-10)

    def test_batch_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        ma, mb = rng.uniform(-0.3, 0.3, size=(2, 2, 8, 3))
        wa, wb = rng.dirichlet(np.ones(8), size=(2, 2))
        loss, d_ma, d_wa, d_mb, d_wb = iou_batch(ma, wa, mb, wb)
        h = 1e-6
        for arr, grad in [(ma, d_ma), (wa, d_wa), (mb, d_mb), (wb, d_wb)]:
            for idx in [tuple(rng.integers(0, s) for s in arr.shape) for _ in range(6)]:
                orig = arr[idx]
                arr[idx] = orig + h
                up = iou_batch(ma, wa, mb, wb)[0].sum()
                arr[idx] = orig - h
                down = iou_batch(ma, wa, mb, wb)[0].sum()
                arr[idx] = orig
                assert grad[idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-9)


class TestKeypointIoU:
    intr = Intrinsics(40.0, 40.0, 16.0, 16.0, 32, 32)

    def sphere(self):
        return VoxelField.from_function(lambda p: np.linalg.norm(p, axis=-1) - 0.5, 16, inv_std=30.0)

    def arrays(self, poses):
        return np.stack([p.R for p in poses]), np.stack([p.translation for p in poses])

    def test_identical_rays_are_stationary(self):
        pose = look_at([0.0, -2.5, 0.3])
        R, c = self.arrays([pose, pose])
        jit = np.full((1, 64), 0.5)

        def grad_at(du):
            res = keypoint_iou(self.sphere(), R, c, self.intr, np.array([0]), np.array([[15.0 + du, 17.0]]),
                               np.array([1]), np.array([[15.0, 17.0]]), jitter_src=jit, jitter_ref=jit)
            assert res.valid.all()
            return np.abs(res.d_pose[0]).max()

        # coincident rays sit at a minimum along the shift direction; half a pixel off is not
        assert grad_at(0.0) < 0.02 * grad_at(0.5)

    def test_pose_gradient_matches_finite_differences(self):
        f = self.sphere()
        poses = [look_at([0.2, -2.5, 0.3]), look_at([1.2, -2.2, 0.5])]
        rng = np.random.default_rng(0)
        src_uv = np.array([[15.2, 16.4], [12.0, 18.5]])
        ref_uv = np.array([[19.1, 15.7], [14.3, 17.9]])
        js, jr = rng.uniform(size=(2, 64)), rng.uniform(size=(2, 64))
        src, ref = np.array([0, 0]), np.array([1, 1])

        def loss(ps):
            R, c = self.arrays(ps)
            return keypoint_iou(f, R, c, self.intr, src, src_uv, ref, ref_uv, jitter_src=js, jitter_ref=jr,
                                with_grad=False).loss

        R, c = self.arrays(poses)
        res = keypoint_iou(f, R, c, self.intr, src, src_uv, ref, ref_uv, jitter_src=js, jitter_ref=jr)
        h = 1e-4
        for node in range(2):
            for k in range(6):
                e = np.zeros(6)
                e[k] = h
                up = [apply_delta(p, e) if i == node else p for i, p in enumerate(poses)]
                down = [apply_delta(p, -e) if i == node else p for i, p in enumerate(poses)]
                num = (loss(up) - loss(down)) / (2 * h)
                if abs(res.d_pose[node, k]) > 1e-6:
                    assert res.d_pose[node, k] == pytest.approx(num, rel=1e-2)

    def test_empty_pairs_are_skipped(self):
        f = VoxelField(np.full((8, 8, 8), 5.0), np.zeros((8, 8, 8, 3)), inv_std=50.0)
        pose = look_at([0.0, -2.5, 0.0])
        R, c = self.arrays([pose, pose])
        uv = np.array([[16.0, 16.0]])
        res = keypoint_iou(f, R, c, self.intr, np.array([0]), uv, np.array([1]), uv)
        assert res.skipped == 1
        assert res.loss == 0.0
