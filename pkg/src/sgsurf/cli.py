"""Command-line entry point: ``sgsurf {gen,train,eval,graph,render}``.

Exit codes: 0 success, 1 bad input (flags, files, configuration), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataset, trainer
from .errors import BundleError, CheckpointError, ConfigurationError, InputError
from .field import pixel_grid, psnr, render_image
from .meshing_eval import evaluate, marching_cubes, write_obj
from .scene_graph import edge_angles, prune, raw_confidence

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2
INPUT_ERRORS = (InputError, BundleError, ConfigurationError, CheckpointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _threads(value):
    if value is not None:
        return value
    env = os.environ.get("SGSURF_THREADS")
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise InputError(f"SGSURF_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise InputError("SGSURF_THREADS must be >= 1")
    return n


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise InputError(f"{out} is not empty; pass --force to overwrite")
    bundle = dataset.generate(scene=args.scene, n_cameras=args.cameras, outlier_frac=args.outlier_frac,
                              seed=args.seed, contaminate=args.contaminate, size=args.size)
    dataset.write_bundle(bundle, out, force=True)
    g = bundle.graph
    print(f"wrote {out}: {len(g)} nodes, {len(g.edges)} edges")
    print(f"outliers ({len(bundle.labels)}): {' '.join(map(str, bundle.labels)) or 'none'}")
    return EXIT_OK


def _load_config(args):
    base = trainer.TrainConfig()
    if args.config:
        base = trainer.TrainConfig.from_file(args.config)
    overrides = {}
    if args.no_prune:
        overrides["use_prune"] = False
    if args.no_confidence:
        overrides["use_confidence"] = False
    if args.no_iou:
        overrides["use_iou"] = False
    if args.no_c2f:
        overrides["use_c2f"] = False
    if args.seed is not None:
        overrides["seed"] = args.seed
    overrides["threads"] = _threads(args.threads)
    cfg = trainer.TrainConfig(**{**base.__dict__, **overrides})
    return cfg


def cmd_train(args):
    cfg = _load_config(args)
    bundle = dataset.read_bundle(args.data, load_mesh=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset.dump_json({"data": str(Path(args.data).resolve())}, out / "run.json")

    def progress(state, report):
        loss = report.losses
        print(f"epoch {report.epoch}: sigma {report.sigma:.2f} photo {loss['photo']:.4f} "
              f"eikonal {loss['eikonal']:.4f} iou {loss['iou']:.4f}", flush=True)

    resume = Path(args.resume) if args.resume else None
    trainer.train(bundle, cfg, out, resume=resume, callback=progress)
    print(f"checkpoints in {out}")
    return EXIT_OK


def _run_state(run_dir, data_dir=None):
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise CheckpointError(f"run directory not found: {run_dir}")
    ckpt = trainer.latest_checkpoint(run_dir)
    cfg_path = run_dir / "config.txt"
    cfg = trainer.TrainConfig.from_file(cfg_path) if cfg_path.is_file() else trainer.TrainConfig()
    if data_dir is None:
        run_json = run_dir / "run.json"
        if not run_json.is_file():
            raise CheckpointError(f"{run_json} missing; pass --data")
        data_dir = dataset.load_json(run_json)["data"]
    bundle = dataset.read_bundle(data_dir)
    state = trainer.load_checkpoint(ckpt, bundle.graph, cfg)
    return bundle, state, cfg, ckpt


def cmd_eval(args):
    bundle, state, cfg, ckpt = _run_state(args.run, args.data)
    if bundle.gt_mesh is None:
        raise BundleError(f"{args.data} has no gt_mesh.obj")
    mesh = marching_cubes(state.field, args.resolution or cfg.mesh_resolution)
    if mesh.empty:
        raise InputError("reconstructed level set is empty; nothing to evaluate")
    sampled = None
    if state.reports:
        sampled = [bundle.graph.index_of(i) for i in state.reports[-1].sampled]
    report = evaluate(mesh, bundle.gt_mesh, state.poses, bundle.gt_poses, state.graph.confidence,
                      initial_poses=[n.pose for n in bundle.graph.nodes], sampled=sampled,
                      node_ids=bundle.graph.ids, K=args.samples, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["checkpoint"] = str(ckpt)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    table = report.table()
    out.with_suffix(".txt").write_text(table + "\n", encoding="utf-8")
    if args.mesh:
        write_obj(mesh, args.mesh)
    print(table)
    return EXIT_OK


def graph_summary(graph, tau):
    """Rows (id, degree, raw, normalized) after pruning at ``tau``, plus removed-edge count."""
    pruned = prune(graph, tau)
    raw = raw_confidence(pruned)
    total = raw.sum()
    norm = raw / total if total > 0 else np.zeros_like(raw)
    rows = [(n.id, int(d), float(r), float(c)) for n, d, r, c in zip(pruned.nodes, pruned.degree(), raw, norm)]
    return rows, len(graph.edges) - len(pruned.edges), pruned


def cmd_graph(args):
    bundle = dataset.read_bundle(args.data, load_mesh=False)
    g = bundle.graph
    rows, removed, pruned = graph_summary(g, args.tau)
    print(f"nodes {len(g)}  edges {len(g.edges)}  removed at tau={args.tau:g}: {removed}  "
          f"isolated: {len(pruned.isolated)}")
    print(f"{'id':>5} {'degree':>6} {'raw':>10} {'confidence':>10}")
    for nid, deg, raw, conf in rows:
        print(f"{nid:>5} {deg:>6} {raw:>10.3f} {conf:>10.4f}")
    print(f"{'sum':>5} {'':>6} {'':>10} {sum(r[3] for r in rows):>10.3f}")
    if args.stats:
        angles = edge_angles(g)
        counts = np.array([len(e) for e in g.edges])
        if len(angles):
            print(f"edge rotation (deg): min {angles.min():.2f} mean {angles.mean():.2f} max {angles.max():.2f}")
            print(f"matches per edge: min {counts.min()} mean {counts.mean():.1f} max {counts.max()}")
        labels = set(bundle.labels)
        print(f"labeled outliers: {sorted(labels) or 'none'}")
    return EXIT_OK


def cmd_render(args):
    bundle, state, cfg, _ = _run_state(args.run, args.data)
    k = bundle.graph.index_of(args.node)
    intr = bundle.graph.intrinsics
    img = render_image(state.field, state.poses[k], intr, args.stride, cfg.n_samples)
    uv = pixel_grid(intr, args.stride).astype(np.int64)
    ref = bundle.graph.nodes[k].image[uv[..., 1], uv[..., 0]]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(dataset.to_uint8(img)).save(args.out, format="PNG")
    print(f"node {args.node}: PSNR {psnr(img, ref):.2f} dB -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="sgsurf", description="Scene-graph-guided voxel SDF reconstruction.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset bundle")
    g.add_argument("--out", required=True)
    g.add_argument("--scene", default="toy", choices=["toy", "sphere", "pair"])
    g.add_argument("--cameras", type=int, default=15)
    g.add_argument("--outlier-frac", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--contaminate", type=float, default=0.0,
                   help="false-match edges to add, as a fraction of true edges")
    g.add_argument("--size", type=int, default=128, help="image width and height")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="optimize field, poses and confidence")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--resume", help="epoch_E checkpoint directory to continue from")
    t.add_argument("--no-iou", action="store_true")
    t.add_argument("--no-c2f", action="store_true")
    t.add_argument("--no-confidence", action="store_true")
    t.add_argument("--no-prune", action="store_true")
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="extract a mesh and score it against ground truth")
    e.add_argument("--run", required=True)
    e.add_argument("--data")
    e.add_argument("--out", required=True)
    e.add_argument("--resolution", type=int)
    e.add_argument("--samples", type=int, default=100_000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--mesh", help="also write the extracted mesh as OBJ")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("graph", help="inspect scene-graph pruning and confidence")
    s.add_argument("--data", required=True)
    s.add_argument("--tau", type=float, default=70.0)
    s.add_argument("--stats", action="store_true")
    s.set_defaults(func=cmd_graph)

    r = sub.add_parser("render", help="render a node's current view")
    r.add_argument("--run", required=True)
    r.add_argument("--node", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--stride", type=int, default=1)
    r.add_argument("--data")
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
