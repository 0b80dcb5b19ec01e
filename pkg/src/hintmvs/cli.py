"""Command-line entry point: ``python -m hintmvs <command>``.

Exit codes: 0 ok, 2 invalid input, 3 runtime failure, 4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME, EXIT_DIVERGED = 0, 2, 3, 4

logger = logging.getLogger("hintmvs")


class InputError(Exception):
    """Bad arguments or input files; mapped to exit code 2."""


def _json_arg(value: str, what: str) -> dict:
    """Accept inline JSON or a path to a JSON file."""
    text = value
    if not value.lstrip().startswith("{"):
        p = Path(value)
        if not p.is_file():
            raise InputError(f"{what}: {value} is neither inline JSON nor an existing file")
        text = p.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"{what}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise InputError(f"{what}: expected a JSON object")
    return doc


def _set_threads(n) -> int:
    if n is None:
        env = os.environ.get("DT_THREADS")
        n = int(env) if env else None
    if n is None:
        return 0
    if n < 1:
        raise InputError("--threads must be >= 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


# --------------------------------------------------------------------------- run


def _resolve_config(args):
    from .pipeline import PipelineConfig, with_combiner

    cfg = PipelineConfig()
    if args.config:
        try:
            cfg = PipelineConfig.from_dict(_json_arg(args.config, "--config"), cfg)
        except (TypeError, ValueError) as e:
            raise InputError(f"--config: {e}") from e
    overrides = {}
    if args.no_confidence:
        overrides["no_confidence"] = True
    if args.cache_dir:
        overrides["cache_dir"] = args.cache_dir
    if overrides:
        cfg = PipelineConfig.from_dict(overrides, cfg)
    if args.combiner:
        try:
            cfg = with_combiner(cfg, args.combiner)
        except (OSError, ValueError) as e:
            raise InputError(f"--combiner: {e}") from e
    return cfg


def cmd_run(args) -> int:
    from .dataio import load_sequence, write_depth
    from .mesh import write_ply
    from .pipeline import PoseNoiseConfig, RunMode, inject_pose_noise, run_sequence, sample_alignment_perturbation
    from .tsdf import TsdfVolume

    mode = RunMode(args.mode)
    if mode is RunMode.REVISIT and not args.prior_volume:
        raise InputError("--mode revisit requires --prior-volume")
    cfg = _resolve_config(args)
    noise = PoseNoiseConfig()
    if args.pose_noise:
        try:
            noise = PoseNoiseConfig(**_json_arg(args.pose_noise, "--pose-noise"))
        except TypeError as e:
            raise InputError(f"--pose-noise: {e}") from e
    prior = TsdfVolume.load(args.prior_volume) if mode is RunMode.REVISIT else None
    frames = load_sequence(args.seq, load_depth=False)
    if not frames:
        raise InputError(f"{args.seq}: sequence has no frames")
    frames = inject_pose_noise(frames, noise)
    alignment = sample_alignment_perturbation(noise) if mode is RunMode.REVISIT else None

    t0 = time.perf_counter()
    result = run_sequence(frames, mode, cfg, prior_volume=prior, prior_alignment=alignment)
    wall = time.perf_counter() - t0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fid, depth in sorted(result.depths.items()):
        write_depth(out / f"depth_{fid:06d}.{args.depth_format}", depth)
    result.volume.save(out / "volume.dttv")
    write_ply(out / "mesh.ply", result.mesh)
    report = dict(result.report)
    report["resolved_config"] = {
        "mode": mode.value,
        "seq": str(args.seq),
        "prior_volume": args.prior_volume,
        "pose_noise": asdict(noise),
        "depth_format": args.depth_format,
        "threads": args.threads_resolved,
        "pipeline": cfg.to_dict(),
    }
    report["wall_seconds"] = wall
    (out / "run_report.json").write_text(json.dumps(report, indent=1))
    print(f"{mode.value}: {len(result.depths)} depth maps, {result.mesh.n_triangles} triangles -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- eval


def _pred_depths(pred_dir: Path) -> dict:
    from .dataio import read_depth

    out = {}
    for p in sorted(pred_dir.glob("depth_*")):
        if p.suffix in (".pfm", ".png"):
            try:
                fid = int(p.stem.split("_")[1])
            except (IndexError, ValueError):
                continue
            out[fid] = p
    return out


def cmd_eval_depth(args) -> int:
    from .dataio import load_sequence, read_depth
    from .evaluation import DepthMetrics, depth_metrics, format_table, mean_depth_metrics, metrics_json, upsample_nearest

    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise InputError(f"--pred: {pred_dir} is not a directory")
    preds = _pred_depths(pred_dir)
    if not preds:
        raise InputError(f"--pred: no depth_*.pfm/png files in {pred_dir}")
    gt = {f.id: f for f in load_sequence(args.gt)}
    missing = sorted(set(preds) - {i for i, f in gt.items() if f.gt_depth is not None})
    if missing:
        raise InputError(f"frame sets differ: predicted frames {missing} have no GT depth in {args.gt}")
    rows = {}
    for fid, path in preds.items():
        g = gt[fid].gt_depth
        rows[f"frame_{fid:06d}"] = depth_metrics(upsample_nearest(read_depth(path), g.height, g.width), g, args.max_depth)
    rows["mean"] = mean_depth_metrics(list(rows.values()))
    table = {"mean": rows["mean"]} if not args.per_frame else rows
    print(format_table(table, DepthMetrics.COLUMNS))
    text = metrics_json(rows)
    if args.json:
        Path(args.json).write_text(text)
    else:
        print(text)
    return EXIT_OK


def cmd_eval_mesh(args) -> int:
    from .evaluation import (
        MeshMetrics,
        build_frustum_volume,
        build_visibility_volume,
        evaluate_meshes,
        format_table,
        metrics_json,
    )
    from .mesh import read_ply

    for p in (args.pred, args.gt):
        if not Path(p).is_file():
            raise InputError(f"{p}: file not found")
    pred, gt = read_ply(args.pred), read_ply(args.gt)
    vis = None
    if args.mask != "none":
        if not args.frames or not Path(args.frames).is_dir():
            raise InputError(f"--mask {args.mask} requires an existing --frames directory")
        from .dataio import load_sequence

        frames = load_sequence(args.frames, load_depth=False)
        if args.mask == "rendered":
            vis = build_visibility_volume(gt, frames, margin=args.margin, voxel_size=args.voxel)
        else:
            vis = build_frustum_volume(gt, frames, voxel_size=args.voxel)
    m = evaluate_meshes(pred, gt, vis, n_points=args.samples, threshold=args.threshold, seed=args.seed)
    rows = {args.mask: m}
    print(format_table(rows, MeshMetrics.COLUMNS))
    text = metrics_json(rows)
    if args.json:
        Path(args.json).write_text(text)
    else:
        print(text)
    return EXIT_OK


# --------------------------------------------------------------------------- train / gen


def _sequence_dirs(root: Path) -> list[Path]:
    from .dataio import SEQUENCE_FILE

    if (root / SEQUENCE_FILE).is_file():
        return [root]
    return sorted(p for p in root.iterdir() if (p / SEQUENCE_FILE).is_file())


def cmd_train_hint(args) -> int:
    from .dataio import load_sequence
    from .hint import HintMlp, TrainConfig, train_hint_mlp
    from .pipeline import PipelineConfig, training_items

    root = Path(args.data)
    if not root.is_dir():
        raise InputError(f"--data: {root} is not a directory")
    seqs = _sequence_dirs(root)
    if not seqs:
        raise InputError(f"--data: no sequence directories under {root}")
    if args.steps < 0:
        raise InputError("--steps must be >= 0")
    cfg = PipelineConfig()
    items = []
    for s in seqs:
        items.extend(training_items(load_sequence(s), cfg))
    if not items:
        raise InputError("--data: no frames with GT depth and source views")
    tcfg = TrainConfig(steps=args.steps, learning_rate=args.lr, seed=args.seed)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".csv")
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_loss", "validation_loss"])

        def log(step, loss, val):
            w.writerow([step, f"{loss:.8f}", "" if val is None else f"{val:.8f}"])

        result = train_hint_mlp(items, cfg.planes(), tcfg, init=HintMlp.initialize(args.seed), log=log)
    result.mlp.save(args.out)
    final = result.train_loss[-1] if result.train_loss else float("nan")
    print(f"trained {args.steps} steps on {len(items)} items; final train loss {final:.5f} -> {args.out}")
    return EXIT_OK


def cmd_gen_scene(args) -> int:
    from .dataio import write_sequence
    from .synth import SceneSpec

    if not Path(args.spec).is_file():
        raise InputError(f"--spec: {args.spec} not found")
    spec = SceneSpec.load(args.spec)
    out = write_sequence(spec, args.out, args.depth_format)
    print(f"wrote {len(spec.poses())} frames -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hintmvs", description="Geometry-hinted multi-view depth estimation and TSDF fusion.")
    p.add_argument("--threads", type=int, default=None, help="worker cap (falls back to $DT_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="estimate and fuse depth over a sequence")
    r.add_argument("--mode", required=True, choices=["incremental", "nohint", "revisit", "offline"])
    r.add_argument("--seq", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--prior-volume")
    r.add_argument("--combiner", help="'analytic' or 'mlp:<path>'")
    r.add_argument("--no-confidence", action="store_true")
    r.add_argument("--pose-noise", help="PoseNoiseConfig as inline JSON or a file")
    r.add_argument("--config", help="pipeline config as inline JSON or a file")
    r.add_argument("--cache-dir", help="offline mode: cost-volume cache directory")
    r.add_argument("--depth-format", choices=["pfm", "png"], default="pfm")
    r.set_defaults(func=cmd_run)

    ed = sub.add_parser("eval-depth", help="depth metrics of predicted maps against GT depth")
    ed.add_argument("--pred", required=True)
    ed.add_argument("--gt", required=True, help="sequence directory with GT depth")
    ed.add_argument("--max-depth", type=float, default=10.0)
    ed.add_argument("--per-frame", action="store_true")
    ed.add_argument("--json")
    ed.set_defaults(func=cmd_eval_depth)

    em = sub.add_parser("eval-mesh", help="mesh metrics with optional visibility trimming")
    em.add_argument("--pred", required=True)
    em.add_argument("--gt", required=True)
    em.add_argument("--frames")
    em.add_argument("--mask", choices=["legacy", "rendered", "none"], default="rendered")
    em.add_argument("--margin", type=float, default=0.05)
    em.add_argument("--voxel", type=float, default=0.02)
    em.add_argument("--threshold", type=float, default=0.05)
    em.add_argument("--samples", type=int, default=200_000)
    em.add_argument("--seed", type=int, default=0)
    em.add_argument("--json")
    em.set_defaults(func=cmd_eval_mesh)

    th = sub.add_parser("train-hint", help="train the hint MLP on synthetic sequences")
    th.add_argument("--data", required=True)
    th.add_argument("--out", required=True)
    th.add_argument("--steps", type=int, default=200)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--lr", type=float, default=1e-3)
    th.add_argument("--log", help="loss CSV (default: <out>.csv)")
    th.set_defaults(func=cmd_train_hint)

    g = sub.add_parser("gen-scene", help="render a synthetic scene spec to a sequence directory")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--depth-format", choices=["pfm", "png"], default="png")
    g.set_defaults(func=cmd_gen_scene)
    return p


def main(argv=None) -> int:
    from .dataio import SequenceFormatError
    from .hint import TrainingDiverged
    from .synth import SceneError
    from .tsdf import VolumeFormatError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads_resolved = _set_threads(args.threads)
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, SequenceFormatError, SceneError, VolumeFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error by contract
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
