"""Rigid-body and pinhole camera math.

Poses are camera-to-world: ``rotation`` maps camera-frame vectors into the
world frame and ``translation`` is the camera center in world coordinates.
Camera frame follows the OpenCV convention (x right, y down, z forward).
Quaternions are stored as ``(w, x, y, z)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import AlignmentError, InputError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# quaternion / rotation helpers
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(m.shape[:-1] + (3, 3))


def matrix_to_quat(m):
    """Shepperd's method; returns the quaternion with non-negative w."""
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return q if q[0] >= 0 else -q


def axis_angle_to_quat(omega):
    """Exponential map from a rotation vector (radians) to a unit quaternion."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x/2)/x -> 1/2 - x^2/48 near zero
    small = theta < 1e-8
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    return np.concatenate([np.cos(half), k * omega], axis=-1)


def quat_to_axis_angle(q):
    q = quat_normalize(q)
    q = np.where(q[..., :1] < 0, -q, q)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    theta = 2.0 * np.arctan2(s, q[..., :1])
    small = s < 1e-12
    return np.where(small, 2.0 * v, v * theta / np.where(small, 1.0, s))


def rotation_about(axis, degrees):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return axis_angle_to_quat(axis * np.deg2rad(degrees))


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise InputError("pose quaternion must be finite and non-zero")
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise InputError("pose translation must be finite")
        # already-unit quaternions are kept bit-for-bit so re-wrapping a pose is lossless
        object.__setattr__(self, "rotation", q if abs(n - 1.0) <= 4e-16 else q / n)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    @property
    def center(self):
        return self.translation

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        q_inv = quat_conjugate(self.rotation)
        return Pose(q_inv, -quat_to_matrix(q_inv) @ self.translation)

    def apply(self, points):
        """Map camera-frame points to world."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.translation

    def allclose(self, other, atol=1e-9):
        same_q = np.allclose(self.rotation, other.rotation, atol=atol) or np.allclose(
            self.rotation, -other.rotation, atol=atol
        )
        return same_q and np.allclose(self.translation, other.translation, atol=atol)

    def __repr__(self):
        return f"Pose(q={np.round(self.rotation, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InputError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InputError("principal point must lie inside the image")

    def K(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def contains(self, u, v):
        """Pixel (x, y) is centered at integer coordinates, so valid range is [-0.5, W-0.5]."""
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= -0.5) & (u <= self.width - 0.5) & (v >= -0.5) & (v <= self.height - 0.5)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


class Projection(NamedTuple):
    u: float
    v: float
    behind: bool


@dataclass(frozen=True, eq=False)
class Similarity:
    """x -> scale * R x + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise InputError("similarity scale must be positive")
        object.__setattr__(self, "rotation", quat_normalize(np.asarray(self.rotation, dtype=np.float64)))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls):
        return cls(1.0, np.array([1.0, 0, 0, 0]), np.zeros(3))

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.R.T + self.translation

    def apply_to_pose(self, pose: Pose) -> Pose:
        q = quat_multiply(self.rotation, pose.rotation)
        return Pose(q, self.apply(pose.translation))

    def inverse(self):
        q_inv = quat_conjugate(self.rotation)
        s_inv = 1.0 / self.scale
        return Similarity(s_inv, q_inv, -s_inv * quat_to_matrix(q_inv) @ self.translation)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.scale * self.R
        m[:3, 3] = self.translation
        return m


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def compose(a: Pose, b: Pose) -> Pose:
    """Pose equivalent to applying ``b`` first, then ``a``."""
    q = quat_multiply(a.rotation, b.rotation)
    return Pose(q, a.R @ b.translation + a.translation)


def apply_delta(pose: Pose, delta) -> Pose:
    """Left-multiply a rotation vector onto the rotation and add a center offset.

    ``delta`` is ``(wx, wy, wz, tx, ty, tz)``.
    """
    delta = np.asarray(delta, dtype=np.float64)
    q = quat_multiply(axis_angle_to_quat(delta[:3]), pose.rotation)
    return Pose(q, pose.translation + delta[3:])


def relative_angle_deg(qa, qb):
    """Angle (degrees) of the relative rotation between quaternion arrays."""
    rel = quat_multiply(quat_conjugate(quat_normalize(qa)), quat_normalize(qb))
    s = np.linalg.norm(rel[..., 1:], axis=-1)
    return np.rad2deg(2.0 * np.arctan2(s, np.abs(rel[..., 0])))


def rotation_angle_between(a: Pose, b: Pose) -> float:
    return float(relative_angle_deg(a.rotation, b.rotation))


def camera_directions(intr: Intrinsics, uv):
    """Unit camera-frame directions for pixel coordinates ``uv`` of shape (..., 2)."""
    uv = np.asarray(uv, dtype=np.float64)
    d = np.stack(
        [(uv[..., 0] - intr.cx) / intr.fx, (uv[..., 1] - intr.cy) / intr.fy, np.ones(uv.shape[:-1])],
        axis=-1,
    )
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_to_ray(pose: Pose, intr: Intrinsics, pixel) -> Ray:
    u, v = float(pixel[0]), float(pixel[1])
    if not intr.contains(u, v):
        raise InputError(f"pixel ({u}, {v}) outside {intr.width}x{intr.height} image")
    d = pose.R @ camera_directions(intr, np.array([u, v]))
    return Ray(pose.translation.copy(), d / np.linalg.norm(d))


def project_points(R, center, intr: Intrinsics, points):
    """Vectorized pinhole projection. Returns (uv, in_front)."""
    points = np.asarray(points, dtype=np.float64)
    cam = (points - center) @ R  # R^T (p - c) row-wise
    z = cam[..., 2]
    in_front = z > 0
    zs = np.where(in_front, z, 1.0)
    uv = np.stack([intr.fx * cam[..., 0] / zs + intr.cx, intr.fy * cam[..., 1] / zs + intr.cy], axis=-1)
    uv = np.where(in_front[..., None], uv, np.nan)
    return uv, in_front


def project(pose: Pose, intr: Intrinsics, point) -> Projection:
    uv, in_front = project_points(pose.R, pose.translation, intr, np.asarray(point, dtype=np.float64))
    return Projection(float(uv[0]), float(uv[1]), not bool(in_front))


def chordal_mean_rotation(quats, weights=None):
    """Chordal L2 rotation mean: dominant eigenvector of the quaternion Gram matrix."""
    quats = quat_normalize(np.asarray(quats, dtype=np.float64))
    if weights is None:
        weights = np.ones(len(quats))
    M = (quats * np.asarray(weights)[:, None]).T @ quats
    _, vecs = np.linalg.eigh(M)
    q = vecs[:, -1]
    return q if q[0] >= 0 else -q


def _umeyama(src, dst):
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var_s = (xs**2).sum() / len(src)
    scale = float((d * np.diag(S)).sum() / var_s)
    t = mu_d - scale * R @ mu_s
    return scale, R, t


def align_similarity(est_centers, gt_centers, est_rotations, gt_rotations, mask=None) -> Similarity:
    """Fit the similarity mapping estimated cameras onto ground truth.

    Orientation is seeded with the chordal mean of the per-camera relative
    rotations ``R_gt R_est^T``; the seed is then refined together with scale
    and translation by a closed-form least-squares fit on camera centers.
    Rotations are (n, 3, 3) matrices.
    """
    est_centers = np.asarray(est_centers, dtype=np.float64)
    gt_centers = np.asarray(gt_centers, dtype=np.float64)
    est_rotations = np.asarray(est_rotations, dtype=np.float64)
    gt_rotations = np.asarray(gt_rotations, dtype=np.float64)
    n = len(est_centers)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.sum() < 3:
        raise AlignmentError(f"need at least 3 inlier cameras, got {int(mask.sum())}")
    src, dst = est_centers[mask], gt_centers[mask]
    sv = np.linalg.svd(src - src.mean(axis=0), compute_uv=False)
    if sv[0] == 0 or sv[1] < 1e-9 * sv[0]:
        raise AlignmentError("camera centers are collinear; similarity is under-determined")

    rel = np.stack([matrix_to_quat(g @ e.T) for g, e in zip(gt_rotations[mask], est_rotations[mask])])
    seed = quat_to_matrix(chordal_mean_rotation(rel))
    scale, R_fix, t = _umeyama(src @ seed.T, dst)
    R = R_fix @ seed
    logger.debug("alignment refinement moved the orientation seed by %.4f deg",
                 np.rad2deg(np.arccos(np.clip((np.trace(R_fix) - 1) / 2, -1, 1))))
    return Similarity(scale, matrix_to_quat(R), t)


def align_poses(est_poses, gt_poses, mask=None) -> Similarity:
    return align_similarity(
        [p.translation for p in est_poses],
        [p.translation for p in gt_poses],
        [p.R for p in est_poses],
        [p.R for p in gt_poses],
        mask,
    )


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera at ``center`` looking at ``target`` with world ``up`` projected out of the view axis."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose.from_matrix(np.stack([right, down, forward], axis=1), center)


def random_rotation_quat(rng, max_deg):
    """Uniform axis, angle uniform in [0, max_deg]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return rotation_about(axis, rng.uniform(0.0, max_deg))


def rays_for_nodes(rotations, centers, intr: Intrinsics, node_idx, uv):
    """World rays for pixels ``uv`` (B, 2) taken in cameras ``node_idx`` (B,)."""
    node_idx = np.asarray(node_idx, dtype=np.int64)
    dirs = np.einsum("bij,bj->bi", np.asarray(rotations)[node_idx], camera_directions(intr, uv))
    return np.asarray(centers, dtype=np.float64)[node_idx], dirs


def ray_pose_gradient(dirs, d_origins, d_dirs, node_idx, n_nodes):
    """Accumulate ray-level gradients into per-node (rotation-vector, center) gradients.

    Rotation deltas are left-multiplied, so a direction moves by ``omega x d``
    and the gradient on ``omega`` is ``d x dL/dd``.
    """
    out = np.zeros((n_nodes, 6))
    np.add.at(out, (np.asarray(node_idx, dtype=np.int64), slice(0, 3)), np.cross(dirs, d_dirs))
    np.add.at(out, (np.asarray(node_idx, dtype=np.int64), slice(3, 6)), d_origins)
    return out
