"""Command-line entry point: ``python -m lumenloc <command>``.

Exit codes: 0 success, 2 usage or validation error, 3 malformed input
file, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import formats
from .augmentation import ddaug
from .confidence import SegmentLoop, TrainingRequest, observe, ConfidenceState, write_phase_log
from .config import KEYS, ConfigError, RunConfig, format_value, load_config
from .metrics import ALIGN_7DOF, ALIGN_NONE, Trajectory, evaluation_report
from .pose_solver import LocalizationFailure, estimate_pose
from .retrieval import retrieve
from .simulator import (
    corrupt_map,
    export_dataset,
    frame_rng,
    generate_lumen,
    generate_trajectory,
    import_dataset,
    render_scene_map,
    simulate_dataset,
)

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_RUNTIME = 0, 2, 3, 4

BENCH_STAGES = (
    ("ingest", "Scene coordinate ingestion"),
    ("ransac", "PnP & RANSAC"),
    ("refine", "Refinement"),
    ("confidence", "Confidence update"),
    ("total", "Total"),
)


class UsageError(ValueError):
    pass


def _nan_to_none(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


# --- evaluate -----------------------------------------------------------------------------


def read_inlier_counts(path) -> Dict[float, int]:
    """Timestamp -> inlier count from a ``frames.jsonl`` written by ``localize``."""
    counts = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if rec["inlier_count"] is not None:
                    counts[float(rec["timestamp"])] = int(rec["inlier_count"])
            except (ValueError, KeyError, TypeError) as exc:
                raise formats.FormatError(path, f"bad frame record ({exc})", line=lineno) from None
    return counts


def evaluate_paths(est_path, ref_path, align: str = ALIGN_NONE, delta: int = 1, keep: float = 1.0, inliers_path=None) -> dict:
    est = Trajectory.load(est_path)
    ref = Trajectory.load(ref_path)
    counts = None
    if keep < 1.0:
        if inliers_path is None:
            inliers_path = os.path.join(os.path.dirname(os.path.abspath(est_path)), "frames.jsonl")
            if not os.path.exists(inliers_path):
                raise UsageError("--keep below 1 needs per-frame inlier counts (--inliers frames.jsonl)")
        counts = read_inlier_counts(inliers_path)
        missing = [t for t in est.timestamps if t not in counts]
        if missing:
            raise UsageError(f"no inlier count for {len(missing)} estimated frames")
    try:
        return evaluation_report(est, ref, align, delta, keep, counts)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_evaluate(args, cfg: RunConfig) -> int:
    if not 0.0 < args.keep <= 1.0:
        raise UsageError("--keep must lie in (0, 1]")
    if args.delta < 1:
        raise UsageError("--delta must be >= 1")
    report = evaluate_paths(args.est, args.ref, args.align, args.delta, args.keep, args.inliers)
    text = _dump({k: _nan_to_none(v) for k, v in report.items()})
    print(text)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.est)), "evaluation.json")
    with open(out, "w") as fh:
        fh.write(text + "\n")
    return EXIT_OK


# --- simulate -----------------------------------------------------------------------------


def cmd_simulate(args, cfg: RunConfig) -> int:
    try:
        dataset = simulate_dataset(cfg.simulation)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if len(dataset) == 0:
        raise UsageError("configuration produces an empty trajectory")
    export_dataset(dataset, args.out_dir)
    print(f"simulated {len(dataset)} frames ({len(dataset.virtual_db)} virtual) -> {args.out_dir}")
    return EXIT_OK


# --- localize -----------------------------------------------------------------------------


def _frame_record(rec, timestamp: float) -> dict:
    est, v = rec.estimate, rec.verdict
    d = {
        "index": rec.index,
        "timestamp": timestamp,
        "phase": rec.phase.value,
        "status": "ok" if est is not None else "gap",
        "failure": rec.failure,
        "inlier_count": None if est is None else int(est.inlier_count),
        "iterations": None if est is None else int(est.iterations_used),
        "mean_reprojection_error": None if est is None else float(est.mean_reprojection_error),
        "confident": None if v is None else v.confident,
        "mu": None if v is None else _nan_to_none(v.mu),
        "sigma": None if v is None else _nan_to_none(v.sigma),
        "threshold": None if v is None else _nan_to_none(v.threshold),
        "triggered_retrain": None if v is None else v.triggered_retrain,
        "uncertain_count": None if v is None else v.uncertain_count,
    }
    t = dict(rec.timings)
    if est is not None:
        t.update(est.timings)
    t["total"] = rec.timings.get("solver", 0.0) + rec.timings.get("confidence", 0.0)
    d["timing_ms"] = {k: 1e3 * float(x) for k, x in sorted(t.items())}
    return d


def cmd_localize(args, cfg: RunConfig) -> int:
    dataset = import_dataset(args.dataset)
    if len(dataset) == 0:
        raise UsageError("dataset has no frames")
    R = cfg.retrieval_range
    if R >= len(dataset.virtual_db):
        raise UsageError(f"retrieval.range {R} must be below the virtual database size {len(dataset.virtual_db)}")
    K = dataset.intrinsics
    policy = cfg.policy
    seed = cfg["seed"]
    use_clean = args.clean
    training_log: List[dict] = []

    def trainer(request: TrainingRequest):
        frames = request.frames if request.reason == "retrain" else dataset.frames[: policy.buffer_capacity]
        res = retrieve(dataset.virtual_db, np.stack([f.descriptor for f in frames]), R)
        augmented = 0
        for f in frames:
            if f.image is not None and f.depth is not None:
                ddaug(f.image, f.depth, K, frame_rng(seed, 5, f.index), cfg.augmentation)
                augmented += 1
        training_log.append(
            {
                "reason": request.reason,
                "trigger_frame": request.trigger_frame,
                "training_frames": [int(f.index) for f in frames],
                "virtual_range": [res.range_start, int(dataset.virtual_db.ids[res.start_position + R])],
                "range_score": res.range_score,
                "augmented_frames": augmented,
            }
        )

    def map_of(f):
        return f.clean_map if use_clean else f.noisy_map

    loop = SegmentLoop(
        lambda f: estimate_pose(K, map_of(f), cfg.ransac),
        trainer,
        policy,
        parallel=args.parallel_refine,
        training_estimator=lambda f: estimate_pose(K, map_of(f), replace(cfg.ransac, refine=False)),
    )
    formats.ensure_dir(args.out_dir)
    est_path = os.path.join(args.out_dir, "est_poses.txt")
    stamps, positions, quats = [], [], []
    with open(os.path.join(args.out_dir, "frames.jsonl"), "w") as fh:
        for rec in loop.run(dataset.frames):
            ts = dataset.frames[rec.index].timestamp
            fh.write(_dump(_frame_record(rec, ts)) + "\n")
            if rec.estimate is not None:
                stamps.append(ts)
                positions.append(rec.estimate.pose.translation)
                quats.append(rec.estimate.pose.quaternion())
    formats.write_tum(est_path, stamps, positions, quats)
    write_phase_log(os.path.join(args.out_dir, "phase_log.txt"), loop.phase_log)
    with open(os.path.join(args.out_dir, "training.jsonl"), "w") as fh:
        for entry in training_log:
            fh.write(_dump(entry) + "\n")

    retrains = sum(1 for e in training_log if e["reason"] == "retrain")
    print(f"localized {len(stamps)}/{len(dataset)} frames, {len(dataset) - len(stamps)} gaps, {retrains} retrains")
    if stamps:
        report = evaluate_paths(est_path, os.path.join(args.dataset, "gt_poses.txt"))
        text = _dump({k: _nan_to_none(v) for k, v in report.items()})
        print(text)
        with open(os.path.join(args.out_dir, "summary.json"), "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK


# --- retrieve -----------------------------------------------------------------------------


def _parse_range(text: str, n: int):
    try:
        a, b = text.split(":")
        start = int(a) if a else 0
        stop = int(b) if b else n
    except ValueError:
        raise UsageError(f"--queries expects START:STOP, got {text!r}") from None
    if not 0 <= start < stop <= n:
        raise UsageError(f"query range {start}:{stop} outside 0:{n}")
    return start, stop


def cmd_retrieve(args, cfg: RunConfig) -> int:
    dataset = import_dataset(args.dataset)
    db = dataset.virtual_db
    R = cfg.retrieval_range if args.range is None else args.range
    if R < 0 or R >= len(db):
        raise UsageError(f"range R={R} must satisfy 0 <= R < database size {len(db)}")
    start, stop = _parse_range(args.queries or f"0:{min(len(dataset), cfg.policy.buffer_capacity)}", len(dataset))
    queries = np.stack([f.descriptor for f in dataset.frames[start:stop]])
    res = retrieve(db, queries, R)
    window = [res.range_start, int(db.ids[res.start_position + R])]
    if args.json:
        print(
            _dump(
                {
                    "range": R,
                    "query_frames": [start, stop],
                    "database_ids": db.ids.tolist(),
                    "hit_scores": res.hit_scores.tolist(),
                    "nearest_ids": res.indices.tolist(),
                    "k_star": res.range_start,
                    "window_ids": window,
                    "range_score": res.range_score,
                }
            )
        )
        return EXIT_OK
    print(f"queries: frames {start}..{stop - 1} ({stop - start}); database: {len(db)} entries; R = {R}")
    print("virtual_id  hits")
    for vid, s in zip(db.ids, res.hit_scores):
        if s:
            print(f"{int(vid):10d}  {int(s):4d}  {'#' * int(s)}")
    print(f"k* = {res.range_start}  window = [{window[0]}, {window[1]}]  range_score = {res.range_score}")
    return EXIT_OK


# --- bench --------------------------------------------------------------------------------


def bench_frames(cfg: RunConfig, n_frames: int, stride: int):
    """Noisy scene-coordinate maps along the configured trajectory, cycling
    through the route when more frames than poses are requested."""
    sim = cfg.simulation
    lumen = generate_lumen(frame_rng(sim.seed, 0, 0), sim.lumen)
    poses = generate_trajectory(lumen, sim.route(), config=sim.trajectory, rng=frame_rng(sim.seed, 1, 0))
    if not poses:
        raise UsageError("configuration produces an empty trajectory")
    maps = []
    for i in range(n_frames):
        clean = render_scene_map(lumen, poses[i % len(poses)], sim.intrinsics, stride)
        maps.append(corrupt_map(clean, sim.noise, frame_rng(sim.seed, 2, i), i))
    return maps


def run_bench(cfg: RunConfig, n_frames: int, stride: int) -> Dict[str, np.ndarray]:
    maps = bench_frames(cfg, n_frames, stride)
    K = cfg.intrinsics
    samples = {key: [] for key, _ in BENCH_STAGES}
    with tempfile.TemporaryDirectory() as tmp:
        paths = []
        for i, m in enumerate(maps):
            p = os.path.join(tmp, f"{i:06d}.scm")
            formats.write_scm(p, m)
            paths.append(p)
        try:
            estimate_pose(K, formats.read_scm(paths[0]), cfg.ransac)  # compile / warm caches
        except LocalizationFailure:
            pass
        state = ConfidenceState()
        for p in paths:
            t0 = time.perf_counter()
            m = formats.read_scm(p)
            t1 = time.perf_counter()
            try:
                est = estimate_pose(K, m, cfg.ransac)
                count, ransac_t, refine_t = est.inlier_count, est.timings["ransac"], est.timings["refine"]
            except LocalizationFailure:
                count, ransac_t, refine_t = None, time.perf_counter() - t1, 0.0
            t2 = time.perf_counter()
            state, _ = observe(state, cfg.policy, count)
            if state.phase.value == "Training":
                state = ConfidenceState()
            t3 = time.perf_counter()
            samples["ingest"].append(t1 - t0)
            samples["ransac"].append(ransac_t)
            samples["refine"].append(refine_t)
            samples["confidence"].append(t3 - t2)
            samples["total"].append(t3 - t0)
    return {k: 1e3 * np.asarray(v) for k, v in samples.items()}


def cmd_bench(args, cfg: RunConfig) -> int:
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    if args.stride < 1:
        raise UsageError("--stride must be >= 1")
    ms = run_bench(cfg, args.frames, args.stride)
    rows = {key: (float(np.median(ms[key])), float(np.percentile(ms[key], 95))) for key, _ in BENCH_STAGES}
    if args.json:
        print(_dump({"frames": args.frames, "stride": args.stride, "median_ms": {k: r[0] for k, r in rows.items()}, "p95_ms": {k: r[1] for k, r in rows.items()}}))
        return EXIT_OK
    K = cfg.intrinsics
    print(f"{args.frames} frames, grid {len(range(0, K.width, args.stride))}x{len(range(0, K.height, args.stride))}")
    print(f"{'stage':<28}{'median ms':>10}{'p95 ms':>10}")
    for key, label in BENCH_STAGES:
        med, p95 = rows[key]
        print(f"{label:<28}{med:>10.3f}{p95:>10.3f}")
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="FILE", help="key = value configuration file (flags override it)")
    g = p.add_argument_group("configuration keys")
    for k in KEYS:
        g.add_argument(
            f"--{k.name}",
            dest=k.name,
            metavar="V",
            default=None,
            help=f"{k.help} (default: {format_value(k.default) or 'unset'})",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lumenloc", description="Synthetic endoluminal localization pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("simulate", help="synthesize a dataset", formatter_class=fmt)
    p.add_argument("out_dir")
    _add_config_flags(p)

    p = sub.add_parser("localize", help="run the localization loop on a dataset", formatter_class=fmt)
    p.add_argument("dataset")
    p.add_argument("out_dir")
    p.add_argument("--parallel-refine", action="store_true", help="run the trainer hook concurrently with testing")
    p.add_argument("--clean", action="store_true", help="use the noise-free scene-coordinate maps")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="ATE / rotational RPE of a trajectory", formatter_class=fmt)
    p.add_argument("est")
    p.add_argument("ref")
    p.add_argument("--align", choices=[ALIGN_NONE, ALIGN_7DOF], default=ALIGN_NONE, help="alignment before ATE")
    p.add_argument("--delta", type=int, default=1, help="frame interval of relative rotations")
    p.add_argument("--keep", type=float, default=1.0, help="fraction of most confident frames kept")
    p.add_argument("--inliers", default=None, help="frames.jsonl with per-frame inlier counts (default: next to EST)")
    p.add_argument("--out", default=None, help="report file (default: evaluation.json next to EST)")
    _add_config_flags(p)

    p = sub.add_parser("retrieve", help="virtual buffer retrieval for a window of frames", formatter_class=fmt)
    p.add_argument("dataset")
    p.add_argument("--queries", default=None, help="START:STOP frame range (default: first buffer_capacity frames)")
    p.add_argument("--range", type=int, default=None, help="window R (default: retrieval.range)")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    _add_config_flags(p)

    p = sub.add_parser("bench", help="per-stage latency on synthetic frames", formatter_class=fmt)
    p.add_argument("--frames", type=int, default=500, help="number of timed frames")
    p.add_argument("--stride", type=int, default=4, help="grid stride (4 gives 80x60 on 320x240)")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    _add_config_flags(p)
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "localize": cmd_localize,
    "evaluate": cmd_evaluate,
    "retrieve": cmd_retrieve,
    "bench": cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    overrides = {k.name: getattr(args, k.name) for k in KEYS if getattr(args, k.name) is not None}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except formats.FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_FORMAT
    except Exception as exc:  # noqa: BLE001 - every other failure maps to the runtime exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
