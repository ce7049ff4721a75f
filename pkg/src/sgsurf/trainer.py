"""Joint optimization of the field, the camera poses and the per-image confidence.

Each epoch blurs the reference images at the current coarse-to-fine sigma,
draws a training multiset of images from the confidence, runs a fixed
number of field-pose steps on ray batches from that multiset, and finishes
with a confidence step that re-renders every image and fuses its PSNR into
the confidence.

All randomness is derived from ``(seed, epoch[, step])``, so a run resumed
from an epoch checkpoint continues exactly as an uninterrupted run would.
"""

from __future__ import annotations

import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field, fields, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .dataset import DatasetBundle, dump_json, graph_from_dict, graph_to_dict, load_json
from .errors import CheckpointError, ConfigurationError, InputError
from .field import VoxelField, field_from_bytes, field_to_bytes, pixel_grid, psnr, quantize_, render_image
from .optimizer import Adam, RayBatch, apply_step, total_loss_and_gradients
from .scene_graph import SceneGraph, init_confidence, match_table, prune, sample_training_set, update_confidence

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 12
    steps_per_epoch: int = 500
    batch_rays: int = 512
    keypoint_rays: int = 16
    alpha: float = 0.1
    beta: float = 0.2
    lam: float = 1.0
    tau: float = 70.0
    sigma0_factor: float = 0.02
    sigma_decay: float = 0.7
    gamma_step: float = 0.1
    psnr_stride: int = 4
    seed: int = 0
    n_samples: int = 64
    resolution: int = 64
    lr_field: float = 1e-2
    lr_s: float = 0.05
    lr_pose: float = 1e-4
    init_radius: float = 0.5
    init_inv_std: float = 40.0
    train_size: int = 0          # images drawn per epoch; 0 means one per node
    mesh_resolution: int = 128
    use_prune: bool = True
    use_confidence: bool = True
    use_iou: bool = True
    use_c2f: bool = True
    threads: int = 1

    # the config file spells the fusion weight "lambda"
    _FILE_ALIASES = {"lambda": "lam"}

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ["steps_per_epoch", "batch_rays", "keypoint_rays", "tau", "sigma0_factor", "sigma_decay",
                    "psnr_stride", "n_samples", "resolution", "lr_field", "lr_s", "init_inv_std",
                    "init_radius", "mesh_resolution", "threads"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"config value {name} must be positive, got {getattr(self, name)!r}")
        # lr_pose = 0 keeps the poses fixed
        for name in ("epochs", "alpha", "beta", "lam", "gamma_step", "train_size", "lr_pose"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"config value {name} must be non-negative")
        if self.keypoint_rays > self.batch_rays:
            raise ConfigurationError("keypoint_rays cannot exceed batch_rays")
        if self.sigma_decay > 1:
            raise ConfigurationError("sigma_decay must be <= 1 so the blur never grows")
        if self.tau > 180:
            raise ConfigurationError("tau must be at most 180 degrees")
        if self.resolution < 2:
            raise ConfigurationError("resolution must be at least 2")

    @property
    def effective_beta(self):
        return self.beta if self.use_iou else 0.0

    @classmethod
    def from_text(cls, text, base: Optional["TrainConfig"] = None):
        """Parse flat ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"config line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            name = cls._FILE_ALIASES.get(key, key)
            if name not in types or name.startswith("_"):
                raise ConfigurationError(f"unknown config key {key!r} (line {lineno})")
            values[name] = _parse_value(types[name], val, key)
        start = asdict(base) if base is not None else {}
        start.update(values)
        return cls(**start)

    @classmethod
    def from_file(cls, path, base=None):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        return cls.from_text(text, base)

    def to_text(self):
        inverse = {v: k for k, v in self._FILE_ALIASES.items()}
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            text = ("true" if val else "false") if isinstance(val, bool) else repr(val)
            lines.append(f"{inverse.get(f.name, f.name)} = {text}")
        return "\n".join(lines) + "\n"


def _parse_value(kind, text, key):
    try:
        if kind in ("bool", bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in ("int", int):
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {text!r} as {kind}") from None


# ---------------------------------------------------------------------------
# coarse-to-fine
# ---------------------------------------------------------------------------

def sigma_schedule(epoch, height, width, config: TrainConfig):
    """Blur sigma for ``epoch``; exactly 0 once it drops below one pixel."""
    if epoch < 0:
        raise InputError("epoch must be non-negative")
    sigma = max(height, width) * config.sigma0_factor * config.sigma_decay**epoch
    return sigma if sigma >= 1.0 else 0.0


def blur_image(image, sigma):
    """Separable Gaussian blur, kernel radius ceil(3 sigma), reflect padding; identity for sigma < 1."""
    if sigma < 0:
        raise InputError("sigma must be non-negative")
    image = np.asarray(image, dtype=np.float64)
    if sigma < 1:
        return image
    radius = int(np.ceil(3 * sigma))
    sig = (sigma, sigma) + (0,) * (image.ndim - 2)
    rad = (radius, radius) + (0,) * (image.ndim - 2)
    return gaussian_filter(image, sigma=sig, radius=rad, mode="reflect")


# ---------------------------------------------------------------------------
# reports and state
# ---------------------------------------------------------------------------

@dataclass
class EpochReport:
    epoch: int
    sigma: float
    losses: dict
    psnr: list
    confidence_before: list
    confidence_after: list
    sampled: list              # node ids of the epoch's training multiset
    iou_skipped: int = 0
    iou_empty_batches: int = 0
    wall_time: float = 0.0

    def to_dict(self):
        d = asdict(self)
        d.pop("wall_time")  # kept out so reports are reproducible byte for byte
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(eq=False)
class TrainState:
    field: VoxelField
    graph: SceneGraph
    optimizer: Adam
    next_epoch: int = 0
    reports: List[EpochReport] = dc_field(default_factory=list)

    @property
    def poses(self):
        return [n.pose for n in self.graph.nodes]


def make_optimizer(config: TrainConfig) -> Adam:
    return Adam({"sdf": config.lr_field, "rgb": config.lr_field, "s": config.lr_s, "pose": config.lr_pose})


def initial_state(graph: SceneGraph, config: TrainConfig) -> TrainState:
    """Prune, initialize confidence and a sphere-shaped field."""
    if config.use_prune:
        graph = prune(graph, config.tau)
    else:
        graph = replace(graph)
        graph.isolated = frozenset(n.id for n, d in zip(graph.nodes, graph.degree()) if d == 0)
    if not graph.edges:
        raise ConfigurationError("no edges survive; the scene graph has nothing to match")
    if config.use_confidence:
        graph = init_confidence(graph)
    else:
        graph = graph.with_confidence(np.full(len(graph), 1.0 / len(graph)))
    field = VoxelField.create(config.resolution, radius=config.init_radius, inv_std=config.init_inv_std)
    quantize_(field)
    return TrainState(field, _canonical(graph), make_optimizer(config))


def _canonical(graph: SceneGraph) -> SceneGraph:
    """Round-trip poses and confidence through their serialized form.

    Checkpoints store exactly these values, so a resumed run and an
    uninterrupted one continue from identical floating-point state.
    """
    restored = graph_from_dict(graph_to_dict(graph, with_state=True))
    nodes = [replace(n, pose=r.pose, confidence=r.confidence) for n, r in zip(graph.nodes, restored.nodes)]
    out = replace(graph, nodes=nodes)
    out.isolated = restored.isolated
    return out


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def make_batch(graph: SceneGraph, targets, sampled, tables, config: TrainConfig, rng) -> RayBatch:
    """Photometric rays from images of the training multiset plus matched keypoint rays."""
    intr = graph.intrinsics
    N = config.n_samples
    n_kp = config.keypoint_rays if config.use_iou else 0
    n_photo = config.batch_rays - config.keypoint_rays
    sampled = np.asarray(sampled, dtype=np.int64)

    idx = sampled[rng.integers(len(sampled), size=n_photo)]
    u = rng.integers(intr.width, size=n_photo)
    v = rng.integers(intr.height, size=n_photo)
    target = np.stack([targets[k][vv, uu] for k, uu, vv in zip(idx, u, v)]) if n_photo else np.zeros((0, 3))
    batch = RayBatch(idx, np.stack([u, v], axis=1).astype(np.float64), target, rng.uniform(size=(n_photo, N)),
                     n_samples=N)

    with_matches = np.array([k for k in sampled if len(tables[k])], dtype=np.int64)
    if n_kp == 0 or with_matches.size == 0:
        if n_kp:
            logger.info("no sampled image has matches; IoU term is empty for this batch")
        return batch
    src = with_matches[rng.integers(len(with_matches), size=n_kp)]
    rows = np.array([tables[k][rng.integers(len(tables[k]))] for k in src])
    batch.kp_src_idx = src
    batch.kp_src_uv = rows[:, 0:2].copy()
    batch.kp_ref_idx = rows[:, 2].astype(np.int64)
    batch.kp_ref_uv = rows[:, 3:5].copy()
    batch.kp_jitter_src = rng.uniform(size=(n_kp, N))
    batch.kp_jitter_ref = rng.uniform(size=(n_kp, N))
    return batch


def field_pose_step(state: TrainState, targets, sampled, tables, config: TrainConfig, rng):
    """One Adam step on a fresh batch; only poses in the training multiset move."""
    batch = make_batch(state.graph, targets, sampled, tables, config, rng)
    losses, grads = total_loss_and_gradients(state.field, state.poses, state.graph.intrinsics, batch,
                                             config.alpha, config.effective_beta)
    in_sample = np.zeros(len(state.graph), dtype=bool)
    in_sample[np.asarray(sampled)] = True
    grads.touched &= in_sample
    if config.lr_pose == 0:
        grads.touched[:] = False
    poses = apply_step(state.field, state.poses, grads, state.optimizer)
    quantize_(state.field)
    state.graph = state.graph.with_poses(poses)
    return losses, batch.n_keypoints == 0 and config.effective_beta > 0


def node_psnr(field: VoxelField, graph: SceneGraph, targets, config: TrainConfig):
    """PSNR of every node's render at ``psnr_stride`` against its (blurred) target."""
    intr = graph.intrinsics
    uv = pixel_grid(intr, config.psnr_stride).astype(np.int64)

    def one(k):
        try:
            img = render_image(field, graph.nodes[k].pose, intr, config.psnr_stride, config.n_samples)
            return psnr(img, targets[k][uv[..., 1], uv[..., 0]])
        except Exception:  # noqa: BLE001 - a failed render becomes the minimum PSNR
            logger.exception("render of node %s failed", graph.nodes[k].id)
            return float("nan")

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            return np.array(list(pool.map(one, range(len(graph)))))
    return np.array([one(k) for k in range(len(graph))])


def confidence_step(state: TrainState, targets, config: TrainConfig, epoch):
    values = node_psnr(state.field, state.graph, targets, config)
    if config.use_confidence:
        gamma = 1.0 + config.gamma_step * epoch
        state.graph = update_confidence(state.graph, values, config.lam, gamma)
    return values


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def run_epoch(state: TrainState, config: TrainConfig, epoch: int) -> EpochReport:
    start = time.perf_counter()
    graph = state.graph
    intr = graph.intrinsics
    sigma = sigma_schedule(epoch, intr.height, intr.width, config) if config.use_c2f else 0.0
    targets = [blur_image(n.image, sigma) for n in graph.nodes]
    tables = match_table(graph)

    conf_before = graph.confidence.tolist()
    rng = np.random.default_rng([config.seed, epoch])
    sampled = sample_training_set(graph, config.train_size or len(graph), rng)

    totals = {"photo": 0.0, "eikonal": 0.0, "iou": 0.0, "total": 0.0}
    skipped = empty = 0
    for step in range(config.steps_per_epoch):
        step_rng = np.random.default_rng([config.seed, epoch, step])
        losses, was_empty = field_pose_step(state, targets, sampled, tables, config, step_rng)
        for key, val in losses.as_dict().items():
            totals[key] += val
        skipped += losses.iou_skipped
        empty += int(was_empty)
    if empty:
        logger.warning("epoch %d: %d batch(es) had no keypoint pairs", epoch, empty)
    means = {k: v / max(config.steps_per_epoch, 1) for k, v in totals.items()}

    values = confidence_step(state, targets, config, epoch)
    state.graph = _canonical(state.graph)
    report = EpochReport(
        epoch=epoch, sigma=float(sigma), losses=means,
        psnr=[None if not np.isfinite(p) else float(p) for p in values],
        confidence_before=conf_before, confidence_after=state.graph.confidence.tolist(),
        sampled=[int(graph.nodes[k].id) for k in sampled], iou_skipped=int(skipped),
        iou_empty_batches=int(empty), wall_time=time.perf_counter() - start,
    )
    state.reports.append(report)
    state.next_epoch = epoch + 1
    logger.info("epoch %d sigma %.2f photo %.4f eik %.4f iou %.4f", epoch, sigma,
                means["photo"], means["eikonal"], means["iou"])
    return report


def train(bundle, config: TrainConfig, out_dir=None, resume=None, callback=None) -> TrainState:
    """Run (or resume) training; writes a checkpoint per epoch when ``out_dir`` is given.

    ``bundle`` is a DatasetBundle or a SceneGraph whose nodes carry images.
    ``resume`` names an ``epoch_E`` checkpoint directory.
    """
    graph = bundle.graph if isinstance(bundle, DatasetBundle) else bundle
    if any(n.image is None for n in graph.nodes):
        raise InputError("every node needs an image to train")
    if resume is not None:
        state = load_checkpoint(resume, graph, config)
    else:
        state = initial_state(graph, config)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")
    for epoch in range(state.next_epoch, config.epochs):
        report = run_epoch(state, config, epoch)
        if out_dir is not None:
            save_checkpoint(state, out_dir / f"epoch_{epoch}", report)
        if callback is not None:
            callback(state, report)
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainState, path, report: Optional[EpochReport] = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "field.bin").write_bytes(field_to_bytes(state.field))
    graph = graph_to_dict(state.graph, with_state=True)
    graph["next_epoch"] = state.next_epoch
    dump_json(graph, path / "graph.json")
    if report is not None:
        dump_json(report.to_dict(), path / "report.json")
        dump_json({"wall_time": report.wall_time}, path / "timing.json")
    buf = io.BytesIO()
    np.savez(buf, **state.optimizer.state_dict())
    (path / "optim.npz").write_bytes(buf.getvalue())
    return path


def load_checkpoint(path, graph: SceneGraph, config: TrainConfig) -> TrainState:
    """Restore a TrainState from ``epoch_E`` onto ``graph`` (which supplies images and gt poses)."""
    path = Path(path)
    if not (path / "field.bin").is_file():
        raise CheckpointError(f"no checkpoint at {path} (field.bin missing)")
    field = field_from_bytes((path / "field.bin").read_bytes())
    saved_raw = load_json(path / "graph.json")
    saved = graph_from_dict(saved_raw, str(path / "graph.json"))
    if saved.ids != graph.ids:
        raise CheckpointError("checkpoint nodes do not match the dataset")
    nodes = [replace(n, pose=s.pose, confidence=s.confidence) for n, s in zip(graph.nodes, saved.nodes)]
    restored = SceneGraph(nodes, saved.edges, graph.intrinsics)
    restored.isolated = saved.isolated
    opt = make_optimizer(config)
    optim_path = path / "optim.npz"
    if optim_path.is_file():
        with np.load(optim_path) as data:
            opt.load_state_dict({k: data[k] for k in data.files})
    reports = []
    for k in range(int(saved_raw.get("next_epoch", 0))):
        rp = path.parent / f"epoch_{k}" / "report.json"
        if rp.is_file():
            reports.append(EpochReport.from_dict(load_json(rp)))
    return TrainState(field, restored, opt, int(saved_raw.get("next_epoch", 0)), reports)


def latest_checkpoint(run_dir) -> Path:
    run_dir = Path(run_dir)
    epochs = sorted((int(p.name.split("_", 1)[1]), p) for p in run_dir.glob("epoch_*")
                    if p.name.split("_", 1)[1].isdigit() and (p / "field.bin").is_file())
    if not epochs:
        raise CheckpointError(f"no checkpoint found under {run_dir}")
    return epochs[-1][1]
