import json

import numpy as np
import pytest

from sgsurf.dataset import (
    DatasetBundle, OutlierSpec, Primitive, SceneSpec, analytic_sdf, gen_matches, generate, graph_from_dict,
    graph_to_dict, inject_outliers, load_json, named_scene, place_cameras, read_bundle, render_gt, same_bytes,
    trace, write_bundle,
)
from sgsurf.errors import InputError, MalformedFileError, MissingFileError, SchemaVersionError
from sgsurf.geometry import Intrinsics, Pose, look_at, project_points, rotation_angle_between
from sgsurf.meshing_eval import chamfer, sample_surface


def sphere_spec(**kw):
    return SceneSpec([Primitive("sphere", Pose.identity(), (0.5,), (0.8, 0.5, 0.3))], **kw)


@pytest.fixture(scope="module")
def small_bundle():
    return generate(n_cameras=8, outlier_frac=0.25, seed=3, size=32, mesh_resolution=32)


class TestAnalyticSDF:
    def test_sphere_value(self):
        assert analytic_sdf(sphere_spec(), [[1.0, 0.0, 0.0]])[0][0] == pytest.approx(0.5)

    def test_union_is_minimum(self):
        spec = named_scene("pair")
        pts = np.random.default_rng(0).uniform(-1, 1, size=(500, 3))
        union = analytic_sdf(spec, pts)[0]
        for p in spec.primitives:
            assert np.all(union <= p.sdf(pts) + 1e-15)

    def test_unit_gradient(self):
        spec = named_scene("toy")
        rng = np.random.default_rng(1)
        pts = rng.uniform(-0.9, 0.9, size=(3000, 3))
        pts = pts[np.abs(analytic_sdf(spec, pts)[0]) > 1e-3][:1000]
        h = 1e-6
        grad = np.stack([(analytic_sdf(spec, pts + h * e)[0] - analytic_sdf(spec, pts - h * e)[0]) / (2 * h)
                         for e in np.eye(3)], axis=1)
        # points on a medial surface have no unique gradient; they are vanishingly rare
        norms = np.linalg.norm(grad, axis=1)
        assert np.mean(np.abs(norms - 1) <= 1e-6) >= 0.99

    def test_primitives_must_fit(self):
        with pytest.raises(InputError):
            SceneSpec([Primitive("sphere", Pose(np.array([1.0, 0, 0, 0]), np.array([0.6, 0, 0])), (0.3,),
                                 (1, 1, 1))])

    def test_unknown_scene(self):
        with pytest.raises(InputError):
            named_scene("teapot")


class TestCameras:
    def test_on_hemisphere_and_aimed(self):
        spec = named_scene("toy", n_cameras=30)
        for p in place_cameras(spec):
            assert abs(np.linalg.norm(p.center) - spec.radius) <= 1e-9
            assert p.center[2] > 0
            axis = p.R[:, 2]
            # distance from the origin to the optical axis line
            assert np.linalg.norm(np.cross(axis, -p.center)) <= 1e-9

    def test_spread_beats_random_placement(self):
        spec = named_scene("toy", n_cameras=30)
        centers = np.stack([p.center for p in place_cameras(spec)]) / spec.radius

        def min_sep(u):
            cos = np.clip(u @ u.T, -1, 1)
            np.fill_diagonal(cos, -1)
            return np.degrees(np.arccos(cos.max()))

        rng = np.random.default_rng(0)
        random_seps = []
        for _ in range(200):
            v = rng.normal(size=(30, 3))
            v[:, 2] = np.abs(v[:, 2])
            random_seps.append(min_sep(v / np.linalg.norm(v, axis=1, keepdims=True)))
        assert min_sep(centers) >= 0.5 * np.mean(random_seps)

    def test_too_few(self):
        with pytest.raises(InputError):
            place_cameras(named_scene("toy", n_cameras=3))


class TestRender:
    def test_empty_view_is_white(self):
        spec = named_scene("toy", height=16, width=16)
        pose = look_at([0.0, -2.2, 0.5], target=[0.0, -5.0, 0.5])
        np.testing.assert_array_equal(render_gt(spec, pose), 1.0)

    def test_silhouette_area(self):
        spec = sphere_spec(height=128, width=128, radius=1.2)
        img = render_gt(spec, look_at([0.0, -1.2, 0.0]))
        area = np.sum(img.min(axis=-1) < 1.0)
        f = spec.intrinsics.fx
        radius_px = f * 0.5 / np.sqrt(1.2**2 - 0.5**2)
        assert area == pytest.approx(np.pi * radius_px**2, rel=0.02)

    def test_deterministic(self):
        spec = named_scene("toy", height=24, width=24)
        pose = place_cameras(spec)[3]
        np.testing.assert_array_equal(render_gt(spec, pose), render_gt(spec, pose))

    def test_trace_hits_surface(self):
        spec = named_scene("toy")
        rng = np.random.default_rng(2)
        o = np.tile([0.0, -2.2, 0.3], (200, 1))
        d = rng.uniform(-0.3, 0.3, size=(200, 3)) + [0, 1, 0]
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        t, hit = trace(spec, o, d)
        assert hit.any()
        assert np.all(np.abs(analytic_sdf(spec, o[hit] + t[hit, None] * d[hit])[0]) < 1e-6)


class TestMatches:
    intr = Intrinsics(64.0, 64.0, 32.0, 32.0, 64, 64)

    def test_identical_poses(self):
        spec = named_scene("toy", height=64, width=64)
        pose = place_cameras(spec)[0]
        (edge,) = gen_matches(spec, [pose, pose], self.intr, per_pair=16, noise_px=0.0, rng=1)
        np.testing.assert_allclose(edge.matches[:, :2], edge.matches[:, 2:], atol=1e-9)

    def test_opposite_cameras_share_nothing(self):
        spec = sphere_spec(height=64, width=64)
        poses = [look_at([0.0, -2.2, 0.0]), look_at([0.0, 2.2, 0.0])]
        assert gen_matches(spec, poses, self.intr, per_pair=16, rng=0, max_angle=180.0) == []

    def test_noise_free_reprojection(self):
        spec = named_scene("toy", height=64, width=64, n_cameras=6)
        poses = place_cameras(spec)
        edges, points = gen_matches(spec, poses, self.intr, per_pair=24, noise_px=0.0, rng=2, return_points=True)
        assert edges
        for e in edges:
            X = points[(e.i, e.j)]
            assert np.all(np.abs(analytic_sdf(spec, X)[0]) < 1e-4)
            for cols, k in ((slice(0, 2), e.i), (slice(2, 4), e.j)):
                uv, front = project_points(poses[k].R, poses[k].translation, self.intr, X)
                assert front.all()
                np.testing.assert_allclose(uv, e.matches[:, cols], atol=1e-6)

    def test_minimum_matches(self):
        with pytest.raises(InputError):
            gen_matches(named_scene("toy"), place_cameras(named_scene("toy"))[:2], per_pair=2)


class TestOutliers:
    poses = place_cameras(named_scene("toy", n_cameras=15))

    def test_zero_fraction(self):
        out, labels = inject_outliers(self.poses, OutlierSpec(fraction=0.0))
        assert labels == [] and all(a is b for a, b in zip(out, self.poses))

    def test_bounds_and_norm(self):
        for seed in range(20):
            out, labels = inject_outliers(self.poses, OutlierSpec(fraction=0.2, seed=seed))
            assert len(labels) == 3
            for k in labels:
                assert rotation_angle_between(out[k], self.poses[k]) <= 20.0 + 1e-9
                assert np.linalg.norm(out[k].translation) == pytest.approx(np.linalg.norm(self.poses[k].translation),
                                                                           abs=1e-12)
                cos = out[k].translation @ self.poses[k].translation / np.linalg.norm(self.poses[k].translation) ** 2
                assert np.degrees(np.arccos(np.clip(cos, -1, 1))) <= 90.0 + 1e-9
            untouched = set(range(15)) - set(labels)
            assert all(out[k] is self.poses[k] for k in untouched)

    def test_fraction_limits(self):
        with pytest.raises(InputError):
            OutlierSpec(fraction=0.5).count(15)
        with pytest.raises(InputError):
            OutlierSpec(fraction=0.01).count(15)


class TestBundleIO:
    def test_default_outlier_count(self):
        assert OutlierSpec().count(15) == 3

    def test_round_trip(self, tmp_path, small_bundle):
        root = write_bundle(small_bundle, tmp_path / "b")
        back = read_bundle(root)
        assert back.labels == small_bundle.labels
        assert back.graph.ids == small_bundle.graph.ids
        for a, b in zip(back.graph.nodes, small_bundle.graph.nodes):
            assert a.pose.allclose(b.pose, atol=0.0)
            np.testing.assert_array_equal(a.image, b.image)
        for a, b in zip(back.gt_poses, small_bundle.gt_poses):
            assert a.allclose(b, atol=0.0)
        assert len(back.graph.edges) == len(small_bundle.graph.edges)
        for a, b in zip(back.graph.edges, small_bundle.graph.edges):
            np.testing.assert_array_equal(a.matches, b.matches)
        np.testing.assert_array_equal(back.gt_mesh.triangles, small_bundle.gt_mesh.triangles)
        assert back.scene.to_dict() == small_bundle.scene.to_dict()

    def test_every_node_has_one_image(self, tmp_path, small_bundle):
        root = write_bundle(small_bundle, tmp_path / "b")
        assert len(list((root / "images").iterdir())) == len(small_bundle.graph)

    def test_refuses_to_overwrite(self, tmp_path, small_bundle):
        write_bundle(small_bundle, tmp_path / "b")
        with pytest.raises(InputError):
            write_bundle(small_bundle, tmp_path / "b")

    def test_truncated_json_reports_offset(self, tmp_path, small_bundle):
        root = write_bundle(small_bundle, tmp_path / "b")
        text = (root / "graph.json").read_bytes()
        (root / "graph.json").write_bytes(text[:200])
        with pytest.raises(MalformedFileError) as info:
            read_bundle(root)
        assert info.value.offset is not None and info.value.offset <= 200
        assert "byte" in str(info.value)

    def test_missing_pieces(self, tmp_path, small_bundle):
        with pytest.raises(MissingFileError):
            read_bundle(tmp_path / "nowhere")
        root = write_bundle(small_bundle, tmp_path / "b")
        (root / "images" / "0002.png").unlink()
        with pytest.raises(MissingFileError):
            read_bundle(root)

    def test_schema_version(self, small_bundle):
        d = graph_to_dict(small_bundle.graph)
        d["version"] = 99
        with pytest.raises(SchemaVersionError):
            graph_from_dict(d)

    def test_quaternion_tolerance(self, small_bundle):
        d = json.loads(json.dumps(graph_to_dict(small_bundle.graph)))
        d["nodes"][0]["qw"] *= 1 + 5e-7
        g = graph_from_dict(d)
        assert np.linalg.norm(g.nodes[0].pose.rotation) == pytest.approx(1.0, abs=1e-15)
        d["nodes"][0]["qw"] *= 1.001
        with pytest.raises(MalformedFileError):
            graph_from_dict(d)

    def test_load_json_missing(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_json(tmp_path / "x.json")

    def test_generation_deterministic(self, tmp_path, small_bundle):
        again = generate(n_cameras=8, outlier_frac=0.25, seed=3, size=32, mesh_resolution=32)
        write_bundle(small_bundle, tmp_path / "a")
        write_bundle(again, tmp_path / "b")
        assert same_bytes(tmp_path / "a", tmp_path / "b")

    def test_labels_match_injection(self, small_bundle):
        assert isinstance(small_bundle, DatasetBundle)
        assert len(small_bundle.labels) == 2
        for k in small_bundle.labels:
            node = small_bundle.graph.node(k)
            assert not node.pose.allclose(small_bundle.gt_poses[small_bundle.graph.index_of(k)], atol=1e-3)


@pytest.mark.slow
def test_gt_mesh_matches_traced_surface():
    spec = named_scene("toy")
    from sgsurf.dataset import TRACE_BOUNDS
    from sgsurf.meshing_eval import mesh_from_grid, sample_sdf_grid
    mesh = mesh_from_grid(sample_sdf_grid(lambda p: analytic_sdf(spec, p)[0], 256, TRACE_BOUNDS), TRACE_BOUNDS)
    rng = np.random.default_rng(0)
    d = rng.normal(size=(100_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = -2.0 * d + rng.uniform(-0.3, 0.3, size=(100_000, 3))
    t, hit = trace(spec, o, d)
    traced = o[hit] + t[hit, None] * d[hit]
    cell_diag = np.sqrt(3) * 2.0 / 255
    _, _, cd = chamfer(sample_surface(mesh, 100_000, 0), traced)
    assert cd <= cell_diag
