"""Command line front end: simulate / run / eval / bench.

Every command writes a manifest.json describing inputs, arguments and
produced files. All outputs except timings and the manifest's timestamps
are deterministic functions of the inputs and the seed.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import StereoVoError
from .evaluation import (DEFAULT_LENGTHS, build_report, format_summary,
                         segment_errors, timing_report, write_report)
from .geometry import StereoCalibration
from .io_sim import (generate_sequence, load_calibration, load_config,
                     read_correspondences, read_poses, write_correspondences,
                     write_labels, write_poses)
from .noise_models import (AcRansac, Amlesac, Mlesac, Msac, PseudoHuber,
                           Ransac, alpha0_stereo)
from .pipeline import RunConfig, prepare_correspondences, process_sequence
from .refinement import RefinementScope, refine
from .robust_init import InitConfig, erode_init, hypothesize_and_test

METHODS = ("ransac", "msac", "mlesac", "amlesac", "ac-ransac", "erode")
SCOPES = {"motion": RefinementScope.MOTION_ONLY,
          "ba": RefinementScope.MOTION_STRUCTURE,
          "ba-noise": RefinementScope.MOTION_STRUCTURE_NOISE}
_DEFAULT_THRESHOLDS = {"ransac": 2.0, "msac": 2.0, "mlesac": 2.79,
                       "amlesac": 2.79, "ac-ransac": 2.79, "erode": 2.79}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _write_manifest(out_dir: Path, command: str, arguments: dict,
                    outputs: dict, started_at: str) -> None:
    manifest = {
        "version": 1,
        "package_version": __version__,
        "command": command,
        "arguments": arguments,
        "outputs": {k: str(v) for k, v in outputs.items()},
        "started_at": started_at,
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _read_calibration_file(path) -> tuple[StereoCalibration, bool]:
    """Calibration plus the real-calibration flag from a JSON file.

    Accepts either a bare calibration object or a config file with a
    "calibration" section.
    """
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    section = obj.get("calibration", obj) if isinstance(obj, dict) else obj
    calib = load_calibration(section)
    return calib, bool(section.get("real_calibration", False))


def _resolve_threshold(method: str, threshold) -> float:
    return _DEFAULT_THRESHOLDS[method] if threshold is None else threshold


def _build_init_config(method: str, calib: StereoCalibration,
                       args) -> InitConfig:
    t = _resolve_threshold(method, args.threshold)
    nu = float(calib.image_width * calib.image_height * calib.disparity_range)
    cov = (args.sigma ** 2) * np.eye(3)
    if method == "ransac":
        model = Ransac(threshold=t)
    elif method == "msac":
        model = Msac(threshold=t)
    elif method == "mlesac":
        model = Mlesac(cov=cov, nu=nu)
    elif method == "amlesac":
        model = Amlesac(cov=cov, nu=nu)
    elif method == "ac-ransac":
        model = AcRansac(alpha0=alpha0_stereo(calib), epsilon=args.nfa_epsilon)
    elif method == "erode":
        model = PseudoHuber(b=args.erode_b, threshold=t)
    else:
        raise ValueError(f"unknown method {method!r}")
    return InitConfig(model=model, iterations=args.iterations,
                      seed=args.seed, inlier_threshold=t)


_DIAG_COLUMNS = ("frame_index", "n_correspondences", "n_inliers", "threshold",
                 "init_score", "degenerate_samples", "gamma", "initial_cost",
                 "final_cost", "refine_iterations", "refine_status", "failed",
                 "error")


def _write_diagnostics(path, diagnostics) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(_DIAG_COLUMNS) + "\n")
        for diag in diagnostics:
            row = []
            for col in _DIAG_COLUMNS:
                value = diag[col]
                if col == "error":
                    value = str(value).replace(",", ";")
                row.append(_fmt(value))
            fh.write(",".join(row) + "\n")


def _write_timings(path, diagnostics) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("frame_index,triangulate_ms,init_ms,refine_ms\n")
        for diag in diagnostics:
            t = diag["timings"]
            fh.write(f"{diag['frame_index']},"
                     f"{1e3 * t['triangulate_s']:.6f},"
                     f"{1e3 * t['init_s']:.6f},"
                     f"{1e3 * t['refine_s']:.6f}\n")


def cmd_simulate(args) -> int:
    started = _now()
    scene, calib = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs, trajectory = generate_sequence(scene, calib)
    outputs = {
        "correspondences": out / "correspondences.csv",
        "poses_gt": out / "poses_gt.txt",
        "labels": out / "labels.csv",
    }
    write_correspondences(outputs["correspondences"], pairs)
    write_poses(outputs["poses_gt"], trajectory)
    write_labels(outputs["labels"], pairs)
    _write_manifest(out, "simulate",
                    {"config": str(args.config), "out": str(out)},
                    outputs, started)
    print(f"simulate: {len(pairs)} frame pairs, "
          f"{sum(len(p) for p in pairs)} correspondences -> {out}")
    return 0


def cmd_run(args) -> int:
    started = _now()
    calib, real_calibration = _read_calibration_file(args.calib)
    pairs = read_correspondences(args.correspondences, calib)
    init_config = _build_init_config(args.method, calib, args)
    if args.weighting == "auto":
        weighting = real_calibration
    else:
        weighting = args.weighting == "on"
    config = RunConfig(init=init_config, scope=SCOPES[args.scope],
                       weighting=weighting)
    trajectory, diagnostics = process_sequence(pairs, calib, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {
        "poses": out / "poses.txt",
        "diagnostics": out / "diagnostics.csv",
        "timings": out / "timings.csv",
    }
    write_poses(outputs["poses"], trajectory)
    _write_diagnostics(outputs["diagnostics"], diagnostics)
    _write_timings(outputs["timings"], diagnostics)
    _write_manifest(out, "run", {
        "correspondences": str(args.correspondences),
        "calib": str(args.calib), "method": args.method,
        "scope": args.scope, "iterations": args.iterations,
        "seed": args.seed,
        "threshold": _resolve_threshold(args.method, args.threshold),
        "sigma": args.sigma, "erode_b": args.erode_b,
        "nfa_epsilon": args.nfa_epsilon, "weighting": weighting,
        "threads": args.threads, "out": str(out),
    }, outputs, started)
    failed = sum(1 for d in diagnostics if d["failed"])
    print(f"run: {args.method}/{args.scope}: {len(pairs)} pairs, "
          f"{failed} failed -> {out}")
    return 0


def cmd_eval(args) -> int:
    started = _now()
    estimated = read_poses(args.estimated)
    ground_truth = read_poses(args.ground_truth)
    lengths = ([float(x) for x in args.lengths.split(",")]
               if args.lengths else list(DEFAULT_LENGTHS))
    segments = segment_errors(estimated, ground_truth, lengths, args.step)
    report = build_report(segments)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"report": out / "report.csv", "summary": out / "summary.txt"}
    write_report(outputs["report"], report, args.method, args.scope)
    summary = format_summary(report, args.method, args.scope)
    with open(outputs["summary"], "w", encoding="utf-8") as fh:
        fh.write(summary)
    _write_manifest(out, "eval", {
        "estimated": str(args.estimated),
        "ground_truth": str(args.ground_truth),
        "lengths": lengths, "step": args.step, "method": args.method,
        "scope": args.scope, "out": str(out),
    }, outputs, started)
    print(summary, end="")
    return 0


def cmd_bench(args) -> int:
    started = _now()
    calib, _ = _read_calibration_file(args.calib)
    pairs = read_correspondences(args.correspondences, calib)
    if not pairs:
        raise StereoVoError("benchmark needs at least one frame pair")
    methods = args.methods.split(",") if args.methods else list(METHODS)
    for m in methods:
        if m not in METHODS:
            raise StereoVoError(f"unknown method {m!r}")
    samples: dict[str, list[float]] = {}

    def add(stage, value):
        samples.setdefault(stage, []).append(value)

    for method in methods:
        init_config = _build_init_config(method, calib, args)
        for pair in pairs:
            for _ in range(args.repeats):
                correspondences = prepare_correspondences(pair, calib, False)
                t0 = time.perf_counter()
                if method == "erode":
                    hyp = erode_init(correspondences, calib, b=args.erode_b,
                                     threshold=_resolve_threshold(
                                         method, args.threshold))
                else:
                    hyp = hypothesize_and_test(correspondences, calib,
                                               init_config)
                t1 = time.perf_counter()
                add(f"{method}/init_total", t1 - t0)
                if method != "erode":
                    add(f"{method}/init_per_iteration",
                        (t1 - t0) / args.iterations)
                inliers = [c for c, keep in
                           zip(correspondences, hyp.inlier_mask) if keep]
                if len(inliers) < 4:
                    continue
                for scope_name, scope in SCOPES.items():
                    t2 = time.perf_counter()
                    refine(scope, hyp.pose, inliers, calib)
                    add(f"{method}/refine_{scope_name}",
                        time.perf_counter() - t2)
    stats = timing_report(samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"timing": out / "timing.csv"}
    with open(outputs["timing"], "w", encoding="utf-8") as fh:
        fh.write("method,stage,mean_ms,median_ms,std_ms,samples\n")
        for stage in sorted(stats):
            method, name = stage.split("/", 1)
            s = stats[stage]
            fh.write(f"{method},{name},{s.mean_ms:.6f},{s.median_ms:.6f},"
                     f"{s.std_ms:.6f},{s.count}\n")
    _write_manifest(out, "bench", {
        "correspondences": str(args.correspondences),
        "calib": str(args.calib), "methods": methods,
        "iterations": args.iterations, "seed": args.seed,
        "repeats": args.repeats, "threads": args.threads, "out": str(out),
    }, outputs, started)
    print(f"bench: {len(stats)} stages -> {outputs['timing']}")
    return 0


def _add_run_like_options(p) -> None:
    p.add_argument("--iterations", type=int, default=1000,
                   help="hypothesis iterations for sampling methods")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--threshold", type=float, default=None,
                   help="inlier threshold T in pixels (default 2.0 for "
                        "ransac/msac, 2.79 otherwise)")
    p.add_argument("--sigma", type=float, default=1.0,
                   help="assumed inlier noise sigma for mlesac/amlesac")
    p.add_argument("--erode-b", type=float, default=2.0,
                   help="Pseudo-Huber shape parameter for erode")
    p.add_argument("--nfa-epsilon", type=float, default=1.0,
                   help="NFA validity level for ac-ransac")
    p.add_argument("--threads", type=int, default=1,
                   help="accepted for interface compatibility; execution "
                        "is sequential")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereovo",
        description="Stereo visual odometry with selectable robust "
                    "initializers and refinement scopes")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic sequence")
    p.add_argument("--config", required=True, help="scene+calibration JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="estimate a trajectory")
    p.add_argument("--correspondences", required=True)
    p.add_argument("--calib", required=True,
                   help="calibration JSON (bare object or config file)")
    p.add_argument("--method", choices=METHODS, default="msac")
    p.add_argument("--scope", choices=sorted(SCOPES), default="motion")
    p.add_argument("--weighting", choices=("auto", "on", "off"),
                   default="auto",
                   help="border down-weighting; auto enables it only for "
                        "data flagged real_calibration")
    p.add_argument("--out", required=True)
    _add_run_like_options(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="segment-error evaluation")
    p.add_argument("--estimated", required=True, help="estimated pose file")
    p.add_argument("--ground-truth", required=True, help="gt pose file")
    p.add_argument("--lengths", default=None,
                   help="comma-separated segment lengths in meters "
                        "(default 100..800 step 50)")
    p.add_argument("--step", type=int, default=1,
                   help="segment start stride in frames")
    p.add_argument("--method", default="-", help="label for the report")
    p.add_argument("--scope", default="-", help="label for the report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-stage timing comparison")
    p.add_argument("--correspondences", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--methods", default=None,
                   help="comma-separated subset of methods (default all)")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_run_like_options(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (StereoVoError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
