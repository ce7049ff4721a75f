"""Synthetic desk-scale scenes and the on-disk dataset bundle.

A scene is a union of analytic primitives (sphere, box, torus) rendered by
sphere tracing from cameras on a hemisphere. Keypoint matches come from
exact geometry with Gaussian pixel noise; outlier poses are made by
perturbing the translation direction and the rotation of a subset of
cameras.

Bundle layout::

    graph.json      scene graph (initial poses, intrinsics, matches)
    images/*.png    8-bit RGB, one per node
    gt_poses.json   ground-truth camera-to-world poses
    gt_mesh.obj     ground-truth surface
    labels.txt      ids of injected outliers, one per line
    scene.json      the analytic scene description
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import InputError, MalformedFileError, MissingFileError, SchemaVersionError
from .geometry import (Intrinsics, Pose, camera_directions, look_at,
                       project_points, quat_multiply, random_rotation_quat, relative_angle_deg,
                       rotation_about)
from .meshing_eval import Mesh, mesh_from_grid, read_obj, sample_sdf_grid, write_obj
from .scene_graph import Edge, Node, SceneGraph

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SCENE_LIMIT = 0.8
TRACE_BOUNDS = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
LIGHT_DIR = np.array([0.4, 0.3, 0.85]) / np.linalg.norm([0.4, 0.3, 0.85])
AMBIENT = 0.3
UNIT_TOLERANCE = 1e-6
MIN_MATCHES = 8


# ---------------------------------------------------------------------------
# scene description
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Primitive:
    shape: str       # sphere | box | torus
    pose: Pose       # object-to-world
    size: tuple      # sphere (r,), box half extents (hx, hy, hz), torus (R, r) around local z
    color: tuple

    def __post_init__(self):
        expected = {"sphere": 1, "box": 3, "torus": 2}
        if self.shape not in expected:
            raise InputError(f"unknown primitive shape {self.shape!r}")
        self.size = tuple(float(s) for s in self.size)
        if len(self.size) != expected[self.shape] or min(self.size) <= 0:
            raise InputError(f"{self.shape} needs {expected[self.shape]} positive size value(s)")
        self.color = tuple(float(c) for c in self.color)

    def half_extent(self):
        """Half size of the world-axis-aligned bounding box."""
        if self.shape == "sphere":
            return np.full(3, self.size[0])
        R = self.pose.R
        if self.shape == "box":
            return np.abs(R) @ np.array(self.size)
        axis = R[:, 2]
        return self.size[0] * np.sqrt(np.clip(1.0 - axis**2, 0.0, None)) + self.size[1]

    def sdf(self, points):
        local = (points - self.pose.translation) @ self.pose.R
        if self.shape == "sphere":
            return np.linalg.norm(local, axis=1) - self.size[0]
        if self.shape == "box":
            q = np.abs(local) - np.array(self.size)
            return np.linalg.norm(np.maximum(q, 0.0), axis=1) + np.minimum(q.max(axis=1), 0.0)
        ring = np.hypot(local[:, 0], local[:, 1]) - self.size[0]
        return np.hypot(ring, local[:, 2]) - self.size[1]

    def to_dict(self):
        return {"shape": self.shape, "rotation": self.pose.rotation.tolist(),
                "translation": self.pose.translation.tolist(), "size": list(self.size),
                "color": list(self.color)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["shape"], Pose(d["rotation"], d["translation"]), tuple(d["size"]), tuple(d["color"]))


@dataclass(eq=False)
class SceneSpec:
    primitives: list
    height: int = 128
    width: int = 128
    n_cameras: int = 15
    radius: float = 2.2
    seed: int = 0

    def __post_init__(self):
        if not self.primitives:
            raise InputError("scene needs at least one primitive")
        for p in self.primitives:
            if np.any(np.abs(p.pose.translation) + p.half_extent() > SCENE_LIMIT + 1e-12):
                raise InputError(f"{p.shape} primitive extends outside [-{SCENE_LIMIT}, {SCENE_LIMIT}]^3")

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(float(self.width), float(self.width), self.width / 2, self.height / 2,
                          self.width, self.height)

    def to_dict(self):
        return {"primitives": [p.to_dict() for p in self.primitives], "height": self.height,
                "width": self.width, "n_cameras": self.n_cameras, "radius": self.radius, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls([Primitive.from_dict(p) for p in d["primitives"]], d["height"], d["width"],
                   d["n_cameras"], d["radius"], d["seed"])


def _placed(shape, center, size, color, axis=(0, 0, 1), degrees=0.0):
    return Primitive(shape, Pose(rotation_about(axis, degrees), center), size, color)


def named_scene(name="toy", **overrides) -> SceneSpec:
    """Built-in scenes: ``toy`` (sphere, box, torus), ``sphere``, ``pair`` (two spheres)."""
    if name == "toy":
        prims = [
            _placed("sphere", (0.25, 0.2, 0.05), (0.3,), (0.85, 0.3, 0.25)),
            _placed("box", (-0.3, -0.15, -0.1), (0.2, 0.16, 0.25), (0.25, 0.45, 0.85), degrees=30.0),
            _placed("torus", (0.05, 0.0, -0.5), (0.35, 0.09), (0.3, 0.75, 0.35), axis=(1, 0, 0), degrees=10.0),
        ]
    elif name == "sphere":
        prims = [_placed("sphere", (0.0, 0.0, 0.0), (0.5,), (0.8, 0.5, 0.3))]
    elif name == "pair":
        prims = [_placed("sphere", (0.3, 0.0, 0.0), (0.3,), (0.85, 0.3, 0.25)),
                 _placed("sphere", (-0.3, 0.1, 0.0), (0.25,), (0.25, 0.45, 0.85))]
    else:
        raise InputError(f"unknown scene {name!r}; choose toy, sphere or pair")
    return SceneSpec(prims, **overrides)


def analytic_sdf(spec: SceneSpec, points):
    """Union SDF and the flat color of the closest primitive at each point."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    values = np.stack([p.sdf(points) for p in spec.primitives])
    nearest = np.argmin(values, axis=0)
    colors = np.array([p.color for p in spec.primitives])[nearest]
    return values[nearest, np.arange(len(points))], colors


def analytic_normals(spec: SceneSpec, points, eps=1e-6):
    grad = np.zeros_like(points)
    for a in range(3):
        step = np.zeros(3)
        step[a] = eps
        grad[:, a] = (analytic_sdf(spec, points + step)[0] - analytic_sdf(spec, points - step)[0]) / (2 * eps)
    return grad / np.maximum(np.linalg.norm(grad, axis=1, keepdims=True), 1e-12)


# ---------------------------------------------------------------------------
# cameras and rendering
# ---------------------------------------------------------------------------

def place_cameras(spec: SceneSpec):
    """Fibonacci spiral over the upper hemisphere, every camera aimed at the origin."""
    n = spec.n_cameras
    if n < 4:
        raise InputError("need at least 4 cameras")
    golden = np.pi * (3.0 - np.sqrt(5.0))
    poses = []
    for k in range(n):
        z = (k + 0.5) / n
        r = np.sqrt(1.0 - z * z)
        phi = k * golden
        center = spec.radius * np.array([r * np.cos(phi), r * np.sin(phi), z])
        poses.append(look_at(center))
    return poses


def _box_span(origins, dirs, bounds=TRACE_BOUNDS):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (bounds[0] - origins) * inv
        t1 = (bounds[1] - origins) * inv
    near = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf).max(axis=1)
    far = np.nan_to_num(np.maximum(t0, t1), nan=np.inf).min(axis=1)
    return np.maximum(near, 0.0), far


def trace(spec: SceneSpec, origins, dirs, max_steps=400, eps=1e-7):
    """Sphere trace rays against the analytic scene; returns (t, hit)."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    near, far = _box_span(origins, dirs)
    t = near.copy()
    hit = np.zeros(len(t), dtype=bool)
    active = np.flatnonzero(near < far)
    for _ in range(max_steps):
        if active.size == 0:
            break
        d, _ = analytic_sdf(spec, origins[active] + t[active, None] * dirs[active])
        done = d < eps
        hit[active[done]] = True
        t[active[~done]] += d[~done]
        escaped = t[active] > far[active]
        active = active[~done & ~escaped]
    if active.size:
        d, _ = analytic_sdf(spec, origins[active] + t[active, None] * dirs[active])
        hit[active[d < 1e-4]] = True
    return t, hit


def shade(spec: SceneSpec, points):
    _, colors = analytic_sdf(spec, points)
    lam = np.clip(analytic_normals(spec, points) @ LIGHT_DIR, 0.0, None)
    return colors * (AMBIENT + (1.0 - AMBIENT) * lam)[:, None]


def render_gt(spec: SceneSpec, pose: Pose, intr: Optional[Intrinsics] = None):
    """Float RGB image in [0, 1], white background."""
    intr = spec.intrinsics if intr is None else intr
    xs, ys = np.meshgrid(np.arange(intr.width, dtype=np.float64), np.arange(intr.height, dtype=np.float64))
    uv = np.stack([xs.ravel(), ys.ravel()], axis=1)
    dirs = camera_directions(intr, uv) @ pose.R.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    t, hit = trace(spec, origins, dirs)
    img = np.ones((len(uv), 3))
    if hit.any():
        img[hit] = shade(spec, origins[hit] + t[hit, None] * dirs[hit])
    return np.clip(img, 0.0, 1.0).reshape(intr.height, intr.width, 3)


def to_uint8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# matches and outliers
# ---------------------------------------------------------------------------

def _surface_points(spec, pose, intr, uv):
    dirs = camera_directions(intr, uv) @ pose.R.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    t, hit = trace(spec, origins, dirs)
    return origins + t[:, None] * dirs, hit


def _visible_from(spec, pose, points, tol=1e-4):
    to_pt = points - pose.translation
    dist = np.linalg.norm(to_pt, axis=1)
    t, hit = trace(spec, np.broadcast_to(pose.translation, points.shape), to_pt / dist[:, None])
    return hit & (t >= dist - tol)


def gen_matches(spec: SceneSpec, poses, intr: Optional[Intrinsics] = None, per_pair=64, noise_px=0.5,
                rng=0, max_angle=90.0, return_points=False):
    """Exact-geometry keypoint matches for every camera pair within ``max_angle`` degrees.

    Returns a list of Edge (node ids are list positions); with ``return_points``
    also a dict mapping (i, j) to the (m, 3) surface points behind the matches.
    """
    if per_pair < MIN_MATCHES:
        raise InputError(f"per_pair must be >= {MIN_MATCHES}")
    intr = spec.intrinsics if intr is None else intr
    rng = np.random.default_rng(rng)
    quats = np.stack([p.rotation for p in poses])
    hi = np.array([intr.width - 0.5, intr.height - 0.5])
    # surface hits of a dense random pixel set per image, reused across pairs
    hits = []
    for p in poses:
        uv = rng.uniform(-0.5, hi, size=(32 * per_pair, 2))
        X, hit = _surface_points(spec, p, intr, uv)
        hits.append((uv[hit], X[hit]))
    edges, points = [], {}
    for i in range(len(poses)):
        for j in range(i + 1, len(poses)):
            if relative_angle_deg(quats[i], quats[j]) > max_angle:
                continue
            uv_i, X = hits[i]
            uv_j, in_front = project_points(poses[j].R, poses[j].translation, intr, X)
            ok = in_front & intr.contains(uv_j[:, 0], uv_j[:, 1])
            ok[ok] = _visible_from(spec, poses[j], X[ok])
            keep = np.flatnonzero(ok)
            if len(keep) < MIN_MATCHES:
                continue
            keep = np.sort(rng.choice(keep, size=min(per_pair, len(keep)), replace=False))
            a, b, pts = uv_i[keep], uv_j[keep], X[keep]
            if noise_px > 0:
                a = np.clip(a + rng.normal(0.0, noise_px, a.shape), -0.5, hi)
                b = np.clip(b + rng.normal(0.0, noise_px, b.shape), -0.5, hi)
            edges.append(Edge(i, j, np.hstack([a, b])))
            points[(i, j)] = pts
    return (edges, points) if return_points else edges


def add_false_matches(edges, n_nodes, intr: Intrinsics, fraction, per_pair=64, rng=0):
    """Add ``round(fraction * len(edges))`` edges of uniformly random matches between
    camera pairs that share no true matches."""
    if not 0 <= fraction <= 1:
        raise InputError("contamination fraction must be in [0, 1]")
    rng = np.random.default_rng(rng)
    taken = {(e.i, e.j) for e in edges}
    free = [(i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes) if (i, j) not in taken]
    count = min(int(round(fraction * len(edges))), len(free))
    if count == 0:
        return list(edges)
    hi = np.array([intr.width - 0.5, intr.height - 0.5])
    picks = rng.choice(len(free), size=count, replace=False)
    extra = []
    for k in sorted(picks):
        i, j = free[k]
        m = np.hstack([rng.uniform(-0.5, hi, (per_pair, 2)), rng.uniform(-0.5, hi, (per_pair, 2))])
        extra.append(Edge(i, j, m))
    return list(edges) + extra


@dataclass
class OutlierSpec:
    fraction: float = 0.2
    eps_t_max: float = 90.0
    eps_r_max: float = 20.0
    seed: int = 0

    def count(self, n):
        if not 0 <= self.fraction <= 1 / 3 + 1e-12:
            raise InputError("outlier fraction must be in [0, 1/3]")
        k = int(round(self.fraction * n))
        if self.fraction > 0 and k < 1:
            raise InputError(f"outlier fraction {self.fraction} selects no camera out of {n}")
        return k


def _rotate_direction(t, degrees, rng):
    """Rotate ``t`` about a random axis perpendicular to it, so its direction moves by exactly ``degrees``."""
    norm = np.linalg.norm(t)
    if norm == 0:
        return t.copy()
    u = t / norm
    axis = np.cross(u, rng.normal(size=3))
    axis /= np.linalg.norm(axis)
    R = Pose(rotation_about(axis, degrees), np.zeros(3)).R
    return R @ t


def inject_outliers(poses, spec: OutlierSpec):
    """Perturb a random subset of poses; returns (noisy poses, sorted outlier indices)."""
    n = len(poses)
    k = spec.count(n)
    rng = np.random.default_rng(spec.seed)
    chosen = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=int)
    out = list(poses)
    for idx in chosen:
        p = poses[idx]
        t = _rotate_direction(p.translation, rng.uniform(0.0, spec.eps_t_max), rng)
        q = quat_multiply(random_rotation_quat(rng, spec.eps_r_max), p.rotation)
        out[idx] = Pose(q, t)
    return out, [int(c) for c in chosen]


def perturb_poses(poses, rot_deg, trans, rng):
    """Small pose noise: a random-axis rotation of up to ``rot_deg`` and a center shift of up to ``trans``."""
    rng = np.random.default_rng(rng)
    out = []
    for p in poses:
        q = quat_multiply(random_rotation_quat(rng, rot_deg), p.rotation)
        step = rng.normal(size=3)
        step *= rng.uniform(0.0, trans) / np.linalg.norm(step)
        out.append(Pose(q, p.translation + step))
    return out


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DatasetBundle:
    graph: SceneGraph                 # initial (noisy) poses, images as float arrays in [0, 1]
    gt_poses: list
    labels: list                      # outlier node ids
    gt_mesh: Optional[Mesh] = None
    scene: Optional[SceneSpec] = None
    root: Optional[Path] = None
    extra: dict = dc_field(default_factory=dict)

    @property
    def intrinsics(self):
        return self.graph.intrinsics


def generate(scene="toy", n_cameras=15, outlier_frac=0.2, seed=0, contaminate=0.0, per_pair=64,
             noise_px=0.5, inlier_rot_deg=3.0, inlier_trans=0.04, mesh_resolution=128,
             size=128, radius=2.2) -> DatasetBundle:
    """Build a complete synthetic bundle in memory."""
    spec = named_scene(scene, n_cameras=n_cameras, seed=seed, height=size, width=size, radius=radius)
    intr = spec.intrinsics
    gt = place_cameras(spec)
    ss = np.random.SeedSequence(seed)
    s_match, s_false, s_out, s_noise = ss.spawn(4)
    edges = gen_matches(spec, gt, intr, per_pair, noise_px, np.random.default_rng(s_match))
    edges = add_false_matches(edges, n_cameras, intr, contaminate, per_pair, np.random.default_rng(s_false))
    noisy = perturb_poses(gt, inlier_rot_deg, inlier_trans, np.random.default_rng(s_noise))
    out_seed = int(np.random.default_rng(s_out).integers(2**31))
    noisy, labels = inject_outliers(noisy, OutlierSpec(outlier_frac, seed=out_seed))
    images = [to_uint8(render_gt(spec, p, intr)).astype(np.float64) / 255.0 for p in gt]
    nodes = [Node(k, noisy[k], images[k], 0.0, gt[k]) for k in range(n_cameras)]
    graph = SceneGraph(nodes, edges, intr)
    mesh = mesh_from_grid(sample_sdf_grid(lambda p: analytic_sdf(spec, p)[0], mesh_resolution, TRACE_BOUNDS),
                          TRACE_BOUNDS)
    return DatasetBundle(graph, gt, labels, mesh, spec)


def _pose_dict(node_id, pose: Pose, **extra):
    q, t = pose.rotation, pose.translation
    d = {"id": node_id, "qw": q[0], "qx": q[1], "qy": q[2], "qz": q[3], "tx": t[0], "ty": t[1], "tz": t[2]}
    d.update(extra)
    return {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in d.items()}


def _pose_from_dict(d, where):
    try:
        q = np.array([d["qw"], d["qx"], d["qy"], d["qz"]], dtype=np.float64)
        t = np.array([d["tx"], d["ty"], d["tz"]], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(f"{where}: bad pose record ({exc})") from None
    if abs(np.linalg.norm(q) - 1.0) > UNIT_TOLERANCE:
        raise MalformedFileError(f"{where}: quaternion norm {np.linalg.norm(q):.9f} is not unit")
    return Pose(q, t)


def graph_to_dict(graph: SceneGraph, image_names=None, with_state=False):
    nodes = []
    for k, n in enumerate(graph.nodes):
        extra = {}
        if image_names is not None:
            extra["image"] = image_names[k]
        if with_state:
            extra["confidence"] = float(n.confidence)
        nodes.append(_pose_dict(n.id, n.pose, **extra))
    d = {
        "version": SCHEMA_VERSION,
        "intrinsics": graph.intrinsics.to_dict(),
        "nodes": nodes,
        "edges": [{"i": e.i, "j": e.j, "matches": e.matches.tolist()} for e in graph.edges],
    }
    if with_state:
        d["isolated"] = sorted(graph.isolated)
    return d


def graph_from_dict(d, where="graph.json"):
    if not isinstance(d, dict):
        raise MalformedFileError(f"{where}: top level must be an object")
    if d.get("version") != SCHEMA_VERSION:
        raise SchemaVersionError(f"{where}: schema version {d.get('version')!r}, expected {SCHEMA_VERSION}")
    try:
        intr = Intrinsics(**d["intrinsics"])
        nodes = [Node(int(n["id"]), _pose_from_dict(n, f"{where} node {n.get('id')}"),
                      None, float(n.get("confidence", 0.0))) for n in d["nodes"]]
        edges = [Edge(int(e["i"]), int(e["j"]), np.asarray(e["matches"], dtype=np.float64)) for e in d["edges"]]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise MalformedFileError(f"{where}: {exc!r}") from None
    graph = SceneGraph(nodes, edges, intr)
    graph.isolated = frozenset(int(i) for i in d.get("isolated", ()))
    return graph


def load_json(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    data = path.read_bytes()
    try:
        return json.loads(data.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}", offset=exc.pos) from None
    except UnicodeDecodeError as exc:
        raise MalformedFileError(f"{path}: not UTF-8 at byte {exc.start}", offset=exc.start) from None


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def write_bundle(bundle: DatasetBundle, path, force=False):
    root = Path(path)
    if root.exists() and any(root.iterdir()) and not force:
        raise InputError(f"{root} exists and is not empty (use force to overwrite)")
    (root / "images").mkdir(parents=True, exist_ok=True)
    names = [f"images/{n.id:04d}.png" for n in bundle.graph.nodes]
    for n, name in zip(bundle.graph.nodes, names):
        Image.fromarray(to_uint8(n.image)).save(root / name, format="PNG")
    dump_json(graph_to_dict(bundle.graph, names), root / "graph.json")
    dump_json({"version": SCHEMA_VERSION,
               "poses": [_pose_dict(n.id, p) for n, p in zip(bundle.graph.nodes, bundle.gt_poses)]},
              root / "gt_poses.json")
    (root / "labels.txt").write_text("".join(f"{i}\n" for i in sorted(bundle.labels)), encoding="ascii")
    if bundle.gt_mesh is not None:
        write_obj(bundle.gt_mesh, root / "gt_mesh.obj")
    if bundle.scene is not None:
        dump_json(bundle.scene.to_dict(), root / "scene.json")
    return root


def read_bundle(path, load_mesh=True) -> DatasetBundle:
    root = Path(path)
    if not root.is_dir():
        raise MissingFileError(f"bundle directory not found: {root}")
    raw = load_json(root / "graph.json")
    graph = graph_from_dict(raw, str(root / "graph.json"))
    for n, rec in zip(graph.nodes, raw["nodes"]):
        if "image" not in rec:
            raise MalformedFileError(f"node {n.id} has no image entry")
        img_path = root / rec["image"]
        if not img_path.is_file():
            raise MissingFileError(f"missing image for node {n.id}: {img_path}")
        with Image.open(img_path) as im:
            n.image = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        if n.image.shape[:2] != (graph.intrinsics.height, graph.intrinsics.width):
            raise MalformedFileError(f"image {img_path} has size {n.image.shape[1]}x{n.image.shape[0]}, "
                                     f"intrinsics say {graph.intrinsics.width}x{graph.intrinsics.height}")

    gt_raw = load_json(root / "gt_poses.json")
    if gt_raw.get("version") != SCHEMA_VERSION:
        raise SchemaVersionError(f"gt_poses.json schema version {gt_raw.get('version')!r}")
    gt_by_id = {int(r["id"]): _pose_from_dict(r, f"gt pose {r.get('id')}") for r in gt_raw["poses"]}
    missing = [n.id for n in graph.nodes if n.id not in gt_by_id]
    if missing:
        raise MalformedFileError(f"gt_poses.json lacks node(s) {missing}")
    gt = [gt_by_id[n.id] for n in graph.nodes]
    for n, p in zip(graph.nodes, gt):
        n.gt_pose = p

    label_path = root / "labels.txt"
    if not label_path.is_file():
        raise MissingFileError(f"missing file: {label_path}")
    try:
        labels = [int(line) for line in label_path.read_text(encoding="ascii").split()]
    except ValueError:
        raise MalformedFileError(f"{label_path}: labels must be integer node ids") from None
    unknown = set(labels) - set(graph.ids)
    if unknown:
        raise MalformedFileError(f"labels reference unknown node(s) {sorted(unknown)}")

    mesh = None
    if load_mesh and (root / "gt_mesh.obj").is_file():
        mesh = read_obj(root / "gt_mesh.obj")
    scene = SceneSpec.from_dict(load_json(root / "scene.json")) if (root / "scene.json").is_file() else None
    return DatasetBundle(graph, gt, sorted(labels), mesh, scene, root)


def bundle_files(path):
    """Relative paths of every file in a bundle, sorted (for byte-level comparisons)."""
    root = Path(path)
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


def same_bytes(a, b):
    fa, fb = bundle_files(a), bundle_files(b)
    return fa == fb and all((Path(a) / f).read_bytes() == (Path(b) / f).read_bytes() for f in fa)

