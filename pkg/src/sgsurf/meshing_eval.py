"""Surface extraction and the mesh/pose evaluation protocol.

Meshes are compared after a 7-DoF alignment of the estimated cameras onto
the ground truth, with both meshes scaled by 10 and K points sampled on
each surface. Distances are L1 (point-to-point), as are the Chamfer and
F-score thresholds.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .errors import AlignmentError, InputError, MalformedFileError, MissingFileError
from .field import VoxelField, sdf_at
from .geometry import Similarity, align_poses, relative_angle_deg

logger = logging.getLogger(__name__)

EVAL_SCALE = 10.0
EVAL_SAMPLES = 100_000
FSCORE_THRESHOLD = 0.64
OUTLIER_TRANS = 0.2    # world units (1 unit = 1 m)
OUTLIER_ROT_DEG = 20.0
DEGENERATE_AREA = 1e-12


@dataclass(eq=False)
class Mesh:
    vertices: np.ndarray   # (V, 3)
    triangles: np.ndarray  # (F, 3) int
    empty: bool = False

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise InputError("triangle index out of range")
        self.empty = len(self.triangles) == 0

    def areas(self):
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def transformed(self, sim: Similarity) -> "Mesh":
        return Mesh(sim.apply(self.vertices), self.triangles.copy())

    def scaled(self, factor) -> "Mesh":
        return Mesh(self.vertices * factor, self.triangles.copy())

    def euler_characteristic(self):
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        return len(self.vertices) - n_edges + len(self.triangles)


def clean_mesh(vertices, triangles) -> Mesh:
    """Drop near-zero-area triangles and vertices nobody references."""
    mesh = Mesh(vertices, triangles)
    if mesh.empty:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    tri = mesh.triangles[mesh.areas() > DEGENERATE_AREA]
    used, inverse = np.unique(tri.ravel(), return_inverse=True)
    return Mesh(mesh.vertices[used], inverse.reshape(-1, 3))


def mesh_from_grid(values, bounds, iso=0.0) -> Mesh:
    """Marching cubes over a grid of samples at the vertices of ``bounds`` subdivided evenly."""
    values = np.asarray(values, dtype=np.float64)
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    if min(values.shape) < 2:
        raise InputError("grid too small for marching cubes")
    if not (values.min() < iso < values.max()):
        logger.warning("level set %.3g not crossed by the grid; mesh is empty", iso)
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    spacing = (bounds[1] - bounds[0]) / (np.array(values.shape) - 1)
    verts, faces, _, _ = measure.marching_cubes(values, level=iso, spacing=tuple(spacing),
                                                method="lorensen", allow_degenerate=False)
    return clean_mesh(verts + bounds[0], faces)


def sample_sdf_grid(sdf_fn, resolution, bounds, chunk=1 << 20):
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    axes = [np.linspace(bounds[0, a], bounds[1, a], resolution) for a in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.empty(len(grid))
    for a in range(0, len(grid), chunk):
        out[a:a + chunk] = sdf_fn(grid[a:a + chunk])
    return out.reshape((resolution,) * 3)


def marching_cubes(field: VoxelField, resolution=128, iso=0.0) -> Mesh:
    """Extract the ``iso`` level set of the field's SDF resampled at ``resolution``^3 over its bounds."""
    if resolution < 8:
        raise InputError("marching cubes resolution must be >= 8")
    values = sample_sdf_grid(lambda p: sdf_at(field, p), resolution, field.bounds)
    return mesh_from_grid(values, field.bounds, iso)


def sample_surface(mesh: Mesh, K=EVAL_SAMPLES, seed=0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.empty:
        raise InputError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=K, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(size=K))
    r2 = rng.uniform(size=K)
    v = mesh.vertices[mesh.triangles[tri]]
    return ((1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1]
            + (r1 * r2)[:, None] * v[:, 2])


def nearest_l1(queries, points) -> np.ndarray:
    """L1 distance from each query to its nearest point."""
    dist, _ = cKDTree(np.asarray(points, dtype=np.float64)).query(np.asarray(queries, dtype=np.float64), p=1)
    return dist


def _check_sets(a, b):
    if len(a) == 0 or len(b) == 0:
        raise InputError("point sets must be non-empty")


def chamfer(points_rec, points_gt):
    """(accuracy, completeness, chamfer) with L1 nearest-neighbor distances."""
    _check_sets(points_rec, points_gt)
    acc = float(nearest_l1(points_rec, points_gt).mean())
    com = float(nearest_l1(points_gt, points_rec).mean())
    return acc, com, (acc + com) / 2


def fscore(points_rec, points_gt, d=FSCORE_THRESHOLD):
    """(precision, recall, F) at L1 threshold ``d``."""
    _check_sets(points_rec, points_gt)
    pre = float(np.mean(nearest_l1(points_rec, points_gt) < d))
    rec = float(np.mean(nearest_l1(points_gt, points_rec) < d))
    f = 0.0 if pre + rec == 0 else 2 * pre * rec / (pre + rec)
    return pre, rec, f


def pose_errors(est_poses, gt_poses):
    """Per-node (translation distance, rotation angle in degrees)."""
    qa = np.stack([p.rotation for p in est_poses])
    qb = np.stack([p.rotation for p in gt_poses])
    trans = np.array([np.linalg.norm(a.translation - b.translation) for a, b in zip(est_poses, gt_poses)])
    return trans, relative_angle_deg(qa, qb)


def outlier_mask(poses, gt_poses, trans_thresh=OUTLIER_TRANS, rot_thresh=OUTLIER_ROT_DEG):
    """True where the pose is off by more than the translation or the rotation threshold."""
    trans, rot = pose_errors(poses, gt_poses)
    return (trans > trans_thresh) | (rot > rot_thresh)


def initial_outlier_mask(poses, gt_poses, max_iter=10):
    """Outlier flags for poses in an arbitrary frame.

    Starts from an all-inlier alignment and refits on the current inliers
    until the flags stop changing.
    """
    mask = np.zeros(len(poses), dtype=bool)
    for _ in range(max_iter):
        try:
            sim = align_poses(poses, gt_poses, ~mask)
        except AlignmentError:
            break
        new = outlier_mask([sim.apply_to_pose(p) for p in poses], gt_poses)
        if np.array_equal(new, mask) or (~new).sum() < 3:
            break
        mask = new
    return mask


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    chamfer: float
    fscore: float
    accuracy: float
    completeness: float
    precision: float
    recall: float
    node_ids: list
    trans_errors: list
    rot_errors: list
    sg_w_trans: float
    sg_w_rot: float
    sg_h_trans: Optional[float]
    sg_h_rot: Optional[float]
    rejection_precision: Optional[float]
    rejection_recall: Optional[float]
    alignment: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self):
        rows = [
            ("Chamfer distance", self.chamfer),
            ("F-score", self.fscore),
            ("Accuracy", self.accuracy),
            ("Completeness", self.completeness),
            ("Precision", self.precision),
            ("Recall", self.recall),
            ("SG-W rotation (deg)", self.sg_w_rot),
            ("SG-W translation", self.sg_w_trans),
            ("SG-H rotation (deg)", self.sg_h_rot),
            ("SG-H translation", self.sg_h_trans),
            ("Outlier rejection precision", self.rejection_precision),
            ("Outlier rejection recall", self.rejection_recall),
        ]
        width = max(len(name) for name, _ in rows)
        lines = [f"{'Metric':<{width}}  Value", f"{'-' * width}  ------"]
        for name, value in rows:
            text = "n/a" if value is None else f"{value:.4f}"
            lines.append(f"{name:<{width}}  {text}")
        return "\n".join(lines)


def aligned_pose_errors(est_poses, gt_poses, initial_poses=None):
    """Similarity-align ``est_poses`` on the inliers of ``initial_poses`` and measure per-node errors.

    Returns ``(similarity, outlier_mask, trans_errors, rot_errors_deg)``.
    """
    if len(gt_poses) != len(est_poses):
        raise InputError("need one ground-truth pose per estimated pose")
    initial = est_poses if initial_poses is None else initial_poses
    mask = initial_outlier_mask(initial, gt_poses)
    sim = align_poses(est_poses, gt_poses, ~mask)
    trans, rot = pose_errors([sim.apply_to_pose(p) for p in est_poses], gt_poses)
    return sim, mask, trans, rot


def evaluate(mesh_rec: Mesh, mesh_gt: Mesh, est_poses, gt_poses, confidence=None, initial_poses=None,
             sampled=None, node_ids=None, K=EVAL_SAMPLES, d=FSCORE_THRESHOLD, scale=EVAL_SCALE,
             seed=0) -> EvalReport:
    """Align, scale, sample and score a reconstruction.

    ``initial_poses`` define the alignment mask (defaults to ``est_poses``);
    ``sampled`` is the collection of node positions drawn in the final epoch,
    used for hard rejection. ``confidence`` defaults to uniform.
    """
    n = len(est_poses)
    sim, gt_outlier, trans, rot = aligned_pose_errors(est_poses, gt_poses, initial_poses)

    if mesh_rec.empty or mesh_gt.empty:
        raise InputError("cannot evaluate an empty mesh")
    rec = sample_surface(mesh_rec.transformed(sim).scaled(scale), K, seed)
    gt = sample_surface(mesh_gt.scaled(scale), K, seed)
    acc, com, cd = chamfer(rec, gt)
    pre, rcl, f = fscore(rec, gt, d)

    conf = np.full(n, 1.0 / n) if confidence is None else np.asarray(confidence, dtype=np.float64)
    w = conf / conf.sum()
    sg_h_t = sg_h_r = rej_p = rej_r = None
    if sampled is not None:
        kept = np.zeros(n, dtype=bool)
        kept[np.asarray(sampled, dtype=np.int64)] = True
        if kept.any():
            sg_h_t, sg_h_r = float(trans[kept].mean()), float(rot[kept].mean())
        rejected = ~kept
        tp = int((rejected & gt_outlier).sum())
        rej_p = tp / int(rejected.sum()) if rejected.any() else None
        rej_r = tp / int(gt_outlier.sum()) if gt_outlier.any() else None

    return EvalReport(
        chamfer=cd, fscore=f, accuracy=acc, completeness=com, precision=pre, recall=rcl,
        node_ids=list(range(n)) if node_ids is None else [int(i) for i in node_ids],
        trans_errors=trans.tolist(), rot_errors=rot.tolist(),
        sg_w_trans=float(w @ trans), sg_w_rot=float(w @ rot),
        sg_h_trans=sg_h_t, sg_h_rot=sg_h_r, rejection_precision=rej_p, rejection_recall=rej_r,
        alignment={"scale": sim.scale, "rotation": sim.rotation.tolist(),
                   "translation": sim.translation.tolist(), "inliers": int((~gt_outlier).sum())},
    )


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------

def write_obj(mesh: Mesh, path):
    with open(path, "w", encoding="ascii") as fh:
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for t in mesh.triangles + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")


def read_obj(path) -> Mesh:
    verts, faces = [], []
    try:
        fh = open(path, encoding="ascii")
    except FileNotFoundError:
        raise MissingFileError(f"mesh file not found: {path}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
            except ValueError:
                raise MalformedFileError(f"{path}:{lineno}: bad OBJ record") from None
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
