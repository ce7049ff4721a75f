"""Dense voxel SDF + RGB radiance field with SDF-based volume rendering.

Everything here is float64 numpy. Rendering is batched over rays; the
forward pass keeps what the reverse pass needs in a :class:`RenderBatch`,
and :func:`backward` maps upstream gradients (on composited color, on
per-sample weights and on per-sample positions) back to the grids, the
sharpness ``inv_std`` and the ray origins/directions.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field as dc_field
from typing import List, Optional

import numpy as np

from .errors import CheckpointError, InputError
from .geometry import Intrinsics, Pose, Ray, camera_directions

logger = logging.getLogger(__name__)

DEFAULT_BOUNDS = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
WHITE = np.ones(3)
ALPHA_EPS = 1e-6

# corner offsets of a cell, bit k of the corner id -> axis k
_CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])
_SIGNS = 2.0 * _CORNERS - 1.0


@dataclass(eq=False)
class VoxelField:
    sdf: np.ndarray
    rgb: np.ndarray
    inv_std: float = 10.0
    bounds: np.ndarray = dc_field(default_factory=lambda: DEFAULT_BOUNDS.copy())

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        self.sdf = np.asarray(self.sdf, dtype=np.float64)
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.sdf.ndim != 3 or self.rgb.shape != self.sdf.shape + (3,):
            raise InputError("sdf must be (R,R,R) and rgb (R,R,R,3)")
        if min(self.sdf.shape) < 2:
            raise InputError("resolution must be at least 2")
        if not self.inv_std > 0:
            raise InputError("inv_std must be positive")

    @classmethod
    def create(cls, resolution=64, bounds=None, radius=0.6, inv_std=10.0, color=0.5):
        """Sphere-initialized field: sdf = |p| - radius, flat grey color."""
        bounds = DEFAULT_BOUNDS.copy() if bounds is None else np.asarray(bounds, dtype=np.float64)
        f = cls(np.zeros((resolution,) * 3), np.full((resolution,) * 3 + (3,), color), inv_std, bounds)
        f.sdf = np.linalg.norm(f.vertex_positions(), axis=-1) - radius
        return f

    @classmethod
    def from_function(cls, sdf_fn, resolution, bounds=None, rgb_fn=None, inv_std=10.0):
        bounds = DEFAULT_BOUNDS.copy() if bounds is None else np.asarray(bounds, dtype=np.float64)
        f = cls(np.zeros((resolution,) * 3), np.full((resolution,) * 3 + (3,), 0.5), inv_std, bounds)
        pts = f.vertex_positions().reshape(-1, 3)
        f.sdf = np.asarray(sdf_fn(pts), dtype=np.float64).reshape((resolution,) * 3)
        if rgb_fn is not None:
            f.rgb = np.asarray(rgb_fn(pts), dtype=np.float64).reshape((resolution,) * 3 + (3,))
        return f

    @property
    def resolution(self):
        return self.sdf.shape

    @property
    def spacing(self):
        return (self.bounds[1] - self.bounds[0]) / (np.array(self.sdf.shape) - 1)

    def vertex_positions(self):
        axes = [np.linspace(self.bounds[0, a], self.bounds[1, a], self.sdf.shape[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def copy(self):
        return VoxelField(self.sdf.copy(), self.rgb.copy(), float(self.inv_std), self.bounds.copy())


# ---------------------------------------------------------------------------
# trilinear interpolation
# ---------------------------------------------------------------------------

@dataclass
class _Lookup:
    flat: np.ndarray      # (M, 8) flat vertex indices
    w: np.ndarray         # (M, 8) trilinear weights
    dw: np.ndarray        # (M, 8, 3) d weight / d position
    inside: np.ndarray    # (M, 3) axis not clamped
    outside: np.ndarray   # (M,) any axis clamped
    d2w: Optional[np.ndarray] = None  # (M, 8, 3, 3) when second-order lookups are requested


def _lookup(field: VoxelField, points, second_order=False):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    res = np.array(field.sdf.shape)
    h = field.spacing
    x = (points - field.bounds[0]) / h
    upper = res - 1
    inside = (x >= 0) & (x <= upper)
    x = np.clip(x, 0, upper)
    base = np.minimum(np.floor(x).astype(np.int64), upper - 1)
    frac = x - base

    # per-axis factor for bit 0 / bit 1
    lo = 1.0 - frac
    f = np.stack([lo, frac], axis=-1)  # (M, 3, 2)
    fx = f[:, 0, _CORNERS[:, 0]]
    fy = f[:, 1, _CORNERS[:, 1]]
    fz = f[:, 2, _CORNERS[:, 2]]
    w = fx * fy * fz
    sx, sy, sz = (_SIGNS[:, a] / h[a] for a in range(3))
    dw = np.stack([sx * fy * fz, fx * sy * fz, fx * fy * sz], axis=-1)
    dw *= inside[:, None, :]

    corner = base[:, None, :] + _CORNERS[None, :, :]
    flat = (corner[..., 0] * res[1] + corner[..., 1]) * res[2] + corner[..., 2]
    lk = _Lookup(flat, w, dw, inside, ~inside.all(axis=1))
    if second_order:
        # mixed partials only; pure second derivatives of a trilinear cell vanish
        d2 = np.zeros(w.shape + (3, 3))
        d2[..., 0, 1] = d2[..., 1, 0] = sx * sy * fz
        d2[..., 0, 2] = d2[..., 2, 0] = sx * fy * sz
        d2[..., 1, 2] = d2[..., 2, 1] = fx * sy * sz
        d2 *= inside[:, None, :, None] * inside[:, None, None, :]
        lk.d2w = d2
    return lk


def _gather(grid, lk: _Lookup):
    if grid.ndim == 3:
        return grid.reshape(-1)[lk.flat]
    return grid.reshape(-1, grid.shape[-1])[lk.flat]


def _scatter(shape, lk: _Lookup, values):
    """Adjoint of trilinear interpolation: spread per-point values onto vertices."""
    n = int(np.prod(shape[:3]))
    if values.ndim == 1:
        out = np.bincount(lk.flat.ravel(), (lk.w * values[:, None]).ravel(), minlength=n)
        return out.reshape(shape)
    chans = [np.bincount(lk.flat.ravel(), (lk.w * values[:, None, c]).ravel(), minlength=n)
             for c in range(values.shape[1])]
    return np.stack(chans, axis=-1).reshape(shape)


def sdf_at(field: VoxelField, points):
    """Trilinear SDF at points; points outside the bounds are clamped (see :func:`outside_mask`)."""
    points = np.asarray(points, dtype=np.float64)
    lk = _lookup(field, points)
    vals = (lk.w * _gather(field.sdf, lk)).sum(axis=1)
    return vals.reshape(points.shape[:-1]) if points.ndim > 1 else float(vals[0])


def sdf_gradient(field: VoxelField, points):
    """Exact derivative of the trilinear interpolant (zero along clamped axes)."""
    points = np.asarray(points, dtype=np.float64)
    lk = _lookup(field, points)
    g = np.einsum("mca,mc->ma", lk.dw, _gather(field.sdf, lk))
    return g.reshape(points.shape) if points.ndim > 1 else g[0]


def rgb_at(field: VoxelField, points):
    points = np.asarray(points, dtype=np.float64)
    lk = _lookup(field, points)
    c = np.clip(np.einsum("mc,mck->mk", lk.w, _gather(field.rgb, lk)), 0.0, 1.0)
    return c.reshape(points.shape) if points.ndim > 1 else c[0]


def outside_mask(field: VoxelField, points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.any((points < field.bounds[0]) | (points > field.bounds[1]), axis=1)


# ---------------------------------------------------------------------------
# rays
# ---------------------------------------------------------------------------

def rays_from_pixels(rotations, centers, intr: Intrinsics, uv):
    """World rays for pixels; ``rotations`` (B,3,3) and ``centers`` (B,3) per ray."""
    dcam = camera_directions(intr, uv)
    dirs = np.einsum("bij,bj->bi", rotations, dcam)
    return np.asarray(centers, dtype=np.float64).copy(), dirs


def _box_intersect(bounds, origins, dirs):
    """Slab test. Returns near, far, hit and which axis/bound produced near and far."""
    d = np.where(np.abs(dirs) < 1e-12, np.where(dirs < 0, -1e-12, 1e-12), dirs)
    t_lo = (bounds[0] - origins) / d
    t_hi = (bounds[1] - origins) / d
    t_min = np.minimum(t_lo, t_hi)
    t_max = np.maximum(t_lo, t_hi)
    near_axis = np.argmax(t_min, axis=1)
    far_axis = np.argmin(t_max, axis=1)
    rows = np.arange(len(origins))
    near = t_min[rows, near_axis]
    far = t_max[rows, far_axis]
    near_clamped = near < 0
    near = np.maximum(near, 0.0)
    hit = far > near + 1e-9
    return near, far, hit, near_axis, far_axis, near_clamped


@dataclass(eq=False)
class RenderBatch:
    """Forward cache for a batch of B rays with N samples each."""

    origins: np.ndarray
    dirs: np.ndarray
    hit: np.ndarray
    near: np.ndarray
    far: np.ndarray
    near_axis: np.ndarray
    far_axis: np.ndarray
    near_clamped: np.ndarray
    s_frac: np.ndarray     # (B, N) fractional sample positions in [0, 1)
    t: np.ndarray          # (B, N)
    points: np.ndarray     # (B, N, 3)
    lookup: _Lookup
    sdf: np.ndarray        # (B, N)
    rgb_raw: np.ndarray    # (B, N, 3)
    rgb: np.ndarray
    phi: np.ndarray
    alpha_raw: np.ndarray  # (B, N-1)
    alpha: np.ndarray      # (B, N)
    trans: np.ndarray      # (B, N)
    weights: np.ndarray    # (B, N)
    color: np.ndarray      # (B, 3)
    acc: np.ndarray        # (B,)
    background: np.ndarray
    inv_std: float
    fixed_span: bool = False


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def render_rays(field: VoxelField, origins, dirs, n_samples=64, jitter=None, background=WHITE, span=None):
    """Render B rays. ``jitter`` (B, N) in [0, 1) stratifies samples; None uses bin midpoints.

    ``span=(near, far)`` overrides the bounding-box interval; gradients then
    treat the interval as constant.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    B, N = len(origins), int(n_samples)
    if N < 2:
        raise InputError("n_samples must be >= 2")
    background = np.asarray(background, dtype=np.float64)
    near, far, hit, near_axis, far_axis, near_clamped = _box_intersect(field.bounds, origins, dirs)
    fixed_span = span is not None
    if fixed_span:
        near = np.broadcast_to(np.asarray(span[0], dtype=np.float64), (B,)).copy()
        far = np.broadcast_to(np.asarray(span[1], dtype=np.float64), (B,)).copy()
        hit = far > near
    if jitter is None:
        jitter = np.full((B, N), 0.5)
    s_frac = (np.arange(N)[None, :] + jitter) / N
    t = near[:, None] + (far - near)[:, None] * s_frac
    points = origins[:, None, :] + t[..., None] * dirs[:, None, :]

    lk = _lookup(field, points.reshape(-1, 3))
    sdf = (lk.w * _gather(field.sdf, lk)).sum(axis=1).reshape(B, N)
    rgb_raw = (lk.w[:, None, :] @ _gather(field.rgb, lk))[:, 0].reshape(B, N, 3)
    rgb = np.clip(rgb_raw, 0.0, 1.0)

    s = float(field.inv_std)
    phi = _sigmoid(s * sdf)
    denom = np.maximum(phi[:, :-1], ALPHA_EPS)
    alpha_raw = (phi[:, :-1] - phi[:, 1:]) / denom
    alpha = np.zeros((B, N))
    alpha[:, :-1] = np.clip(alpha_raw, 0.0, 1.0)
    alpha[~hit] = 0.0
    trans = np.ones((B, N))
    trans[:, 1:] = np.cumprod(1.0 - alpha[:, :-1], axis=1)
    weights = alpha * trans
    acc = weights.sum(axis=1)
    color = (weights[..., None] * rgb).sum(axis=1) + (1.0 - acc)[:, None] * background

    return RenderBatch(origins, dirs, hit, near, far, near_axis, far_axis, near_clamped, s_frac, t,
                       points, lk, sdf, rgb_raw, rgb, phi, alpha_raw, alpha, trans, weights, color,
                       acc, background, s, fixed_span)


@dataclass
class FieldGrad:
    d_sdf: np.ndarray
    d_rgb: np.ndarray
    d_s: float

    @classmethod
    def zeros_like(cls, field: VoxelField):
        return cls(np.zeros_like(field.sdf), np.zeros_like(field.rgb), 0.0)

    def __iadd__(self, other):
        self.d_sdf += other.d_sdf
        self.d_rgb += other.d_rgb
        self.d_s += other.d_s
        return self


def backward(field: VoxelField, rb: RenderBatch, d_color=None, d_weights=None, d_points=None):
    """Reverse pass of :func:`render_rays`.

    Returns ``(FieldGrad, d_origins, d_dirs)``.
    """
    B, N = rb.t.shape
    g_w = np.zeros((B, N)) if d_weights is None else np.array(d_weights, dtype=np.float64)
    d_rgb_s = np.zeros((B, N, 3))
    if d_color is not None:
        d_color = np.asarray(d_color, dtype=np.float64)
        g_w += np.einsum("bnk,bk->bn", rb.rgb - rb.background, d_color)
        d_rgb_s = rb.weights[..., None] * d_color[:, None, :]
        d_rgb_s *= (rb.rgb_raw > 0) & (rb.rgb_raw < 1)
    g_w[~rb.hit] = 0.0

    # w_i = alpha_i * T_i  ->  d alpha_k = T_k (g_k - R_k), R_k = sum_{i>k} g_i alpha_i prod_{k<j<i}(1-alpha_j)
    d_alpha = np.zeros((B, N))
    R = np.zeros(B)
    for k in range(N - 2, -1, -1):
        R = rb.alpha[:, k + 1] * g_w[:, k + 1] + (1.0 - rb.alpha[:, k + 1]) * R
        d_alpha[:, k] = rb.trans[:, k] * (g_w[:, k] - R)

    # alpha_k = (phi_k - phi_{k+1}) / max(phi_k, eps), clamped to [0, 1]
    da = d_alpha[:, :-1] * ((rb.alpha_raw > 0) & (rb.alpha_raw < 1))
    da[~rb.hit] = 0.0
    p0, p1 = rb.phi[:, :-1], rb.phi[:, 1:]
    big = p0 >= ALPHA_EPS
    denom = np.where(big, p0, ALPHA_EPS)
    d_phi = np.zeros((B, N))
    d_phi[:, :-1] += da * np.where(big, p1 / (denom * denom), 1.0 / ALPHA_EPS)
    d_phi[:, 1:] -= da / denom

    dphi_dz = rb.phi * (1.0 - rb.phi)
    d_sdf_s = d_phi * dphi_dz * rb.inv_std
    d_s = float((d_phi * dphi_dz * rb.sdf).sum())

    lk = rb.lookup
    flat_dsdf = d_sdf_s.reshape(-1)
    flat_drgb = d_rgb_s.reshape(-1, 3)
    grad = FieldGrad(_scatter(field.sdf.shape, lk, flat_dsdf), _scatter(field.rgb.shape, lk, flat_drgb), d_s)

    # positions: through sdf and rgb interpolation, plus direct position gradients
    corner_g = flat_dsdf[:, None] * _gather(field.sdf, lk)  # (M, 8)
    if d_color is not None:
        corner_g += (_gather(field.rgb, lk) @ flat_drgb[:, :, None])[..., 0]
    gp = (corner_g[:, None, :] @ lk.dw)[:, 0].reshape(B, N, 3)
    if d_points is not None:
        gp = gp + d_points
    gp[~rb.hit] = 0.0

    d_o = gp.sum(axis=1)
    d_d = np.einsum("bn,bnk->bk", rb.t, gp)
    d_t = np.einsum("bnk,bk->bn", gp, rb.dirs)
    d_near = (d_t * (1.0 - rb.s_frac)).sum(axis=1)
    d_far = (d_t * rb.s_frac).sum(axis=1)

    rows = np.arange(B)
    for tval, dval, axis, active in (
        (rb.near, d_near, rb.near_axis, rb.hit & ~rb.near_clamped & ~rb.fixed_span),
        (rb.far, d_far, rb.far_axis, rb.hit & ~rb.fixed_span),
    ):
        da_ = rb.dirs[rows, axis]
        da_ = np.where(np.abs(da_) < 1e-12, 1e-12, da_)
        coef = np.where(active, dval / da_, 0.0)
        # t = (bound - o_a) / d_a
        d_o[rows, axis] -= coef
        d_d[rows, axis] -= coef * tval
    return grad, d_o, d_d


# ---------------------------------------------------------------------------
# convenience wrappers
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class RaySample:
    t: float
    position: np.ndarray
    sdf: float
    weight: float
    color: np.ndarray


@dataclass(eq=False)
class RenderResult:
    color: np.ndarray
    samples: List[RaySample]
    accumulated_weight: float


def render_ray(field: VoxelField, ray: Ray, n_samples=64, background=WHITE, jitter=None,
               near=None, far=None) -> RenderResult:
    """Render a single ray. ``near``/``far`` default to the box intersection."""
    jit = None if jitter is None else np.asarray(jitter, dtype=np.float64).reshape(1, -1)
    span = None
    if near is not None or far is not None:
        if near is None or far is None or not near < far:
            raise InputError("need near < far")
        span = (np.array([float(near)]), np.array([float(far)]))
    rb = render_rays(field, ray.origin[None], ray.direction[None], n_samples, jit, background, span=span)
    samples = [RaySample(float(rb.t[0, i]), rb.points[0, i].copy(), float(rb.sdf[0, i]),
                         float(rb.weights[0, i]), rb.rgb[0, i].copy()) for i in range(rb.t.shape[1])]
    return RenderResult(rb.color[0].copy(), samples, float(rb.acc[0]))


def pixel_grid(intr: Intrinsics, stride=1):
    """Integer pixel centers (u, v) of every ``stride``-th pixel, row-major."""
    if stride < 1:
        raise InputError("stride must be >= 1")
    xs = np.arange(0, intr.width, stride)
    ys = np.arange(0, intr.height, stride)
    uu, vv = np.meshgrid(xs, ys)
    return np.stack([uu, vv], axis=-1).astype(np.float64)


def render_image(field: VoxelField, pose: Pose, intr: Intrinsics, stride=1, n_samples=64,
                 background=WHITE, chunk=8192):
    """Deterministic render of every ``stride``-th pixel center."""
    uv = pixel_grid(intr, stride)
    shape = uv.shape[:2]
    uv = uv.reshape(-1, 2)
    dirs = camera_directions(intr, uv) @ pose.R.T
    out = np.empty((len(uv), 3))
    for a in range(0, len(uv), chunk):
        o = np.broadcast_to(pose.translation, (len(dirs[a:a + chunk]), 3))
        out[a:a + chunk] = render_rays(field, o, dirs[a:a + chunk], n_samples, None, background).color
    return out.reshape(shape + (3,))


def psnr(rendered, reference, cap=100.0):
    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if rendered.shape != reference.shape:
        raise InputError(f"shape mismatch {rendered.shape} vs {reference.shape}")
    mse = float(np.mean((rendered - reference) ** 2))
    if mse <= 0:
        return float(cap)
    return float(min(cap, 10.0 * np.log10(1.0 / mse)))


# ---------------------------------------------------------------------------
# checkpoint blob
# ---------------------------------------------------------------------------

_MAGIC = b"SGVF"
_VERSION = 1
_HEADER = struct.Struct("<4sI3I6ff")


def field_to_bytes(field: VoxelField) -> bytes:
    res = field.sdf.shape
    header = _HEADER.pack(_MAGIC, _VERSION, *res, *field.bounds.reshape(-1), float(field.inv_std))
    return header + field.sdf.astype("<f4").tobytes() + field.rgb.astype("<f4").tobytes()


def field_from_bytes(blob: bytes) -> VoxelField:
    if len(blob) < _HEADER.size:
        raise CheckpointError("field blob shorter than its header")
    magic, version, rx, ry, rz, *rest = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise CheckpointError("not a voxel field blob (bad magic)")
    if version != _VERSION:
        raise CheckpointError(f"unsupported field blob version {version}")
    bounds = np.array(rest[:6], dtype=np.float64).reshape(2, 3)
    inv_std = rest[6]
    n = rx * ry * rz
    expect = _HEADER.size + 4 * n * 4
    if len(blob) != expect:
        raise CheckpointError(f"field blob has {len(blob)} bytes, expected {expect}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    sdf = data[:n].reshape(rx, ry, rz).astype(np.float64)
    rgb = data[n:].reshape(rx, ry, rz, 3).astype(np.float64)
    return VoxelField(sdf, rgb, float(inv_std), bounds)


def quantize_(field: VoxelField):
    """Round parameters to what the float32 checkpoint stores, so save/load is lossless."""
    field.sdf = field.sdf.astype(np.float32).astype(np.float64)
    field.rgb = field.rgb.astype(np.float32).astype(np.float64)
    field.inv_std = float(np.float32(field.inv_std))
    field.bounds = field.bounds.astype(np.float32).astype(np.float64)
    return field
