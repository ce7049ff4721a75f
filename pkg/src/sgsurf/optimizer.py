"""Loss assembly, hand-derived gradients, Adam updates and a finite-difference checker."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field, replace
from typing import Dict, Optional

import numpy as np

from .field import VoxelField, _gather, _lookup, backward, render_rays
from .geometry import Intrinsics, apply_delta, quat_to_matrix, ray_pose_gradient, rays_for_nodes
from .iou_loss import keypoint_iou

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    photo: float
    eikonal: float
    iou: float
    total: float
    alpha: float
    beta: float
    iou_pairs: int = 0
    iou_skipped: int = 0

    def as_dict(self):
        return {"photo": self.photo, "eikonal": self.eikonal, "iou": self.iou, "total": self.total}


@dataclass
class GradientSet:
    d_sdf: np.ndarray
    d_rgb: np.ndarray
    d_s: float
    d_pose: np.ndarray     # (n_nodes, 6): rotation vector, center
    touched: np.ndarray    # (n_nodes,) bool

    def all_finite(self):
        return (np.all(np.isfinite(self.d_sdf)) and np.all(np.isfinite(self.d_rgb))
                and np.isfinite(self.d_s) and np.all(np.isfinite(self.d_pose)))


@dataclass
class RayBatch:
    """Everything that makes one loss evaluation deterministic.

    Photometric rays: ``photo_idx`` node indices, ``photo_uv`` pixel coords,
    ``photo_target`` reference colors. Keypoint pairs: source/reference node
    indices and subpixel coordinates. Jitter arrays fix the stratification.
    """

    photo_idx: np.ndarray
    photo_uv: np.ndarray
    photo_target: np.ndarray
    photo_jitter: np.ndarray
    kp_src_idx: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    kp_src_uv: np.ndarray = dc_field(default_factory=lambda: np.zeros((0, 2)))
    kp_ref_idx: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    kp_ref_uv: np.ndarray = dc_field(default_factory=lambda: np.zeros((0, 2)))
    kp_jitter_src: Optional[np.ndarray] = None
    kp_jitter_ref: Optional[np.ndarray] = None
    n_samples: int = 64
    eik_points: Optional[np.ndarray] = None

    @property
    def n_keypoints(self):
        return len(self.kp_src_idx)


# ---------------------------------------------------------------------------
# individual terms
# ---------------------------------------------------------------------------

def photometric_loss(rendered, reference):
    """Mean absolute error over pixels and channels, and its (sub)gradient."""
    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    diff = rendered - reference
    n = diff.size
    if n == 0:
        return 0.0, np.zeros_like(rendered)
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


_FLAT_NORM = 1e-12


def eikonal_loss(field: VoxelField, points, position_grad=False):
    """Mean of (|grad f| - 1)^2 over points.

    Returns ``(loss, d_sdf_grid, d_points)``; ``d_points`` is None unless
    ``position_grad``. Points where the gradient vanishes contribute loss 1
    and no gradient.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    k = len(points)
    if k == 0:
        return 0.0, np.zeros_like(field.sdf), np.zeros((0, 3))
    lk = _lookup(field, points, second_order=position_grad)
    vals = _gather(field.sdf, lk)
    g = np.einsum("mca,mc->ma", lk.dw, vals)
    norm = np.linalg.norm(g, axis=1)
    r = norm - 1.0
    loss = float(np.mean(r * r))

    # roundoff-level gradients have no meaningful direction
    nz = norm > _FLAT_NORM
    d_g = np.zeros_like(g)
    d_g[nz] = (2.0 / k) * (r[nz] / norm[nz])[:, None] * g[nz]
    corner_w = np.einsum("mca,ma->mc", lk.dw, d_g)
    d_grid = np.bincount(lk.flat.ravel(), corner_w.ravel(), minlength=field.sdf.size).reshape(field.sdf.shape)
    d_points = np.einsum("mcab,mc,mb->ma", lk.d2w, vals, d_g) if position_grad else None
    return loss, d_grid, d_points


def poses_to_arrays(poses):
    rotations = np.stack([quat_to_matrix(p.rotation) for p in poses])
    centers = np.stack([p.translation for p in poses])
    return rotations, centers


def total_loss_and_gradients(field: VoxelField, poses, intr: Intrinsics, batch: RayBatch,
                             alpha=0.1, beta=0.2, photo_weight=1.0, with_grad=True):
    """``photo + alpha * eikonal + beta * iou`` and gradients for field and poses.

    ``photo_weight`` exists for the gradient checker to isolate terms; the
    reported ``total`` always uses it.
    """
    rotations, centers = poses_to_arrays(poses)
    n = len(poses)
    N = batch.n_samples

    o, d = rays_for_nodes(rotations, centers, intr, batch.photo_idx, batch.photo_uv)
    rb = render_rays(field, o, d, N, batch.photo_jitter)
    photo, d_color = photometric_loss(rb.color, batch.photo_target)

    eik_points = batch.eik_points if batch.eik_points is not None else rb.points[rb.hit].reshape(-1, 3)
    eik, d_sdf_e, _ = eikonal_loss(field, eik_points)

    iou_res = None
    iou = 0.0
    if beta != 0 and batch.n_keypoints > 0:
        iou_res = keypoint_iou(field, rotations, centers, intr, batch.kp_src_idx, batch.kp_src_uv,
                               batch.kp_ref_idx, batch.kp_ref_uv, N, batch.kp_jitter_src,
                               batch.kp_jitter_ref, with_grad=with_grad)
        iou = iou_res.loss
    total = photo_weight * photo + alpha * eik + beta * iou
    losses = LossBreakdown(photo, eik, iou, total, alpha, beta,
                           0 if iou_res is None else int(iou_res.valid.sum()),
                           0 if iou_res is None else iou_res.skipped)
    if not with_grad:
        return losses, None

    grad, d_o, d_d = backward(field, rb, photo_weight * d_color)
    grad.d_sdf += alpha * d_sdf_e
    d_pose = ray_pose_gradient(rb.dirs, d_o, d_d, batch.photo_idx, n)
    touched = np.zeros(n, dtype=bool)
    touched[batch.photo_idx] = True
    if iou_res is not None:
        grad.d_sdf += beta * iou_res.field_grad.d_sdf
        grad.d_s += beta * iou_res.field_grad.d_s
        d_pose += beta * iou_res.d_pose
        touched[batch.kp_src_idx[iou_res.valid]] = True
        touched[batch.kp_ref_idx[iou_res.valid]] = True
    return losses, GradientSet(grad.d_sdf, grad.d_rgb, grad.d_s, d_pose, touched)


def freeze_eikonal_points(field: VoxelField, poses, intr: Intrinsics, batch: RayBatch) -> RayBatch:
    """Copy of ``batch`` with the eikonal sample set fixed at the current poses."""
    rotations, centers = poses_to_arrays(poses)
    o, d = rays_for_nodes(rotations, centers, intr, batch.photo_idx, batch.photo_uv)
    rb = render_rays(field, o, d, batch.n_samples, batch.photo_jitter)
    return replace(batch, eik_points=rb.points[rb.hit].reshape(-1, 3))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class Adam:
    """Adam with named parameter groups.

    Dense groups (``sdf``, ``rgb``, ``s``) are updated in place by :meth:`step`.
    Row-sparse groups (``pose``) keep a per-row step count so rows that get no
    gradient in a step are left untouched, moments included.
    """

    def __init__(self, lrs: Dict[str, float], beta1=0.9, beta2=0.999, eps=1e-8):
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, np.ndarray] = {}

    def update(self, name, grad, rows=None):
        """Return the additive update for ``grad``; None when the gradient is rejected."""
        grad = np.asarray(grad, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            logger.warning("non-finite gradient for group %r; step skipped", name)
            return None
        if name not in self.m:
            self.m[name] = np.zeros_like(grad)
            self.v[name] = np.zeros_like(grad)
            self.t[name] = np.zeros(grad.shape[:1] if rows is not None else (), dtype=np.int64)
        m, v, t = self.m[name], self.v[name], self.t[name]
        lr = self.lrs[name]
        if rows is None:
            t += 1
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * grad * grad
            bc1 = 1 - self.beta1 ** int(t)
            bc2 = 1 - self.beta2 ** int(t)
            return -lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        rows = np.asarray(rows, dtype=bool)
        out = np.zeros_like(grad)
        if not rows.any():
            return out
        t[rows] += 1
        g = grad[rows]
        m[rows] = self.beta1 * m[rows] + (1 - self.beta1) * g
        v[rows] = self.beta2 * v[rows] + (1 - self.beta2) * g * g
        tt = t[rows].astype(np.float64)[:, None]
        bc1 = 1 - self.beta1**tt
        bc2 = 1 - self.beta2**tt
        out[rows] = -lr * (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + self.eps)
        return out

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        """In-place update of dense parameter arrays."""
        for name, g in grads.items():
            upd = self.update(name, g)
            if upd is not None:
                params[name] += upd
        return params

    def state_dict(self):
        out = {}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
            out[f"t.{name}"] = self.t[name]
        return out

    def load_state_dict(self, state):
        for key, val in state.items():
            kind, name = key.split(".", 1)
            getattr(self, kind)[name] = np.array(val)


S_MIN = 1e-3


def apply_step(field: VoxelField, poses, grads: GradientSet, opt: Adam):
    """Adam step on field grids, sharpness and touched poses. Returns new poses."""
    upd = opt.update("sdf", grads.d_sdf)
    if upd is not None:
        field.sdf += upd
    upd = opt.update("rgb", grads.d_rgb)
    if upd is not None:
        field.rgb += upd
    upd = opt.update("s", np.array(grads.d_s))
    if upd is not None:
        field.inv_std = max(S_MIN, float(field.inv_std + upd))
    poses = list(poses)
    if "pose" in opt.lrs and opt.lrs["pose"] > 0:
        upd = opt.update("pose", grads.d_pose, rows=grads.touched)
        if upd is not None:
            for k in np.flatnonzero(grads.touched):
                poses[k] = apply_delta(poses[k], upd[k])
    return poses


# ---------------------------------------------------------------------------
# finite-difference harness
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float]
    checked: Dict[str, int]
    worst: Dict[str, tuple]

    @property
    def overall(self):
        vals = [v for v in self.max_rel_error.values() if np.isfinite(v)]
        return max(vals) if vals else 0.0


def check_gradients(field: VoxelField, poses, intr: Intrinsics, batch: RayBatch, alpha=0.1, beta=0.2,
                    photo_weight=1.0, h=1e-4, threshold=1e-6, groups=("sdf", "rgb", "s", "pose")):
    """Compare every analytic gradient entry above ``threshold`` with central differences."""

    if batch.eik_points is None:
        batch = freeze_eikonal_points(field, poses, intr, batch)

    def loss_at(f, ps):
        return total_loss_and_gradients(f, ps, intr, batch, alpha, beta, photo_weight, with_grad=False)[0].total

    _, grads = total_loss_and_gradients(field, poses, intr, batch, alpha, beta, photo_weight)
    errs: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    worst: Dict[str, tuple] = {}

    def record(group, idx, analytic, numeric):
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
        counts[group] = counts.get(group, 0) + 1
        if rel > errs.get(group, -1.0):
            errs[group] = rel
            worst[group] = (idx, analytic, numeric)

    for group, arr in (("sdf", grads.d_sdf), ("rgb", grads.d_rgb)):
        if group not in groups:
            continue
        for flat in np.flatnonzero(np.abs(arr) > threshold):
            f_p, f_m = field.copy(), field.copy()
            getattr(f_p, group).reshape(-1)[flat] += h
            getattr(f_m, group).reshape(-1)[flat] -= h
            record(group, int(flat), arr.reshape(-1)[flat], (loss_at(f_p, poses) - loss_at(f_m, poses)) / (2 * h))

    if "s" in groups and abs(grads.d_s) > threshold:
        f_p, f_m = field.copy(), field.copy()
        f_p.inv_std += h
        f_m.inv_std -= h
        record("s", 0, grads.d_s, (loss_at(f_p, poses) - loss_at(f_m, poses)) / (2 * h))

    if "pose" in groups:
        for k in range(len(poses)):
            for c in range(6):
                if abs(grads.d_pose[k, c]) <= threshold:
                    continue
                delta = np.zeros(6)
                delta[c] = h
                p_p, p_m = list(poses), list(poses)
                p_p[k] = apply_delta(poses[k], delta)
                p_m[k] = apply_delta(poses[k], -delta)
                record("pose", (k, c), grads.d_pose[k, c], (loss_at(field, p_p) - loss_at(field, p_m)) / (2 * h))

    for g in groups:
        errs.setdefault(g, 0.0)
        counts.setdefault(g, 0)
    return GradCheckReport(errs, counts, worst)
