"""Trajectory accuracy metrics (KITTI-style segment errors) and timing stats.

A segment starts at a frame and ends at the first frame whose cumulative
ground-truth path distance from the start reaches the requested length. The
pose discrepancy E = inv(gt_rel) * est_rel over the segment yields
translation error ||t_E|| / L (dimensionless, reported as percent) and
rotation error angle(R_E) / L (radians per meter).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geometry import rotation_angle
from .pipeline import Trajectory

DEFAULT_LENGTHS = tuple(float(x) for x in range(100, 801, 50))


@dataclass(frozen=True)
class SegmentError:
    first_frame: int
    length: float
    t_err: float  # meters of drift per meter traveled
    r_err: float  # radians of drift per meter traveled


@dataclass(frozen=True)
class EvalReport:
    per_length: dict[float, tuple[float, float, int]]
    overall_t_err: float
    overall_r_err: float
    by_length_t_err: float
    by_length_r_err: float
    segment_count: int


@dataclass(frozen=True)
class StageTiming:
    mean_ms: float
    median_ms: float
    std_ms: float
    count: int


def _path_distances(trajectory: Trajectory) -> np.ndarray:
    positions = trajectory.positions()
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def segment_errors(estimated: Trajectory, ground_truth: Trajectory,
                   lengths: Sequence[float] = DEFAULT_LENGTHS,
                   step: int = 1) -> list[SegmentError]:
    """Per-segment drift of estimated against ground_truth.

    Segments start every `step` frames; a (start, length) combination is
    skipped when the remaining ground-truth path is shorter than the length.
    Both trajectories must have equal frame counts.
    """
    if len(estimated) != len(ground_truth):
        raise ValueError(f"trajectory lengths differ: {len(estimated)} vs "
                         f"{len(ground_truth)}")
    if step < 1:
        raise ValueError("step must be a positive integer")
    lengths = [float(x) for x in lengths]
    if any(x <= 0.0 for x in lengths):
        raise ValueError("segment lengths must be positive")
    n = len(ground_truth)
    if n == 0:
        return []
    dist = _path_distances(ground_truth)
    out: list[SegmentError] = []
    for start in range(0, n, step):
        for length in lengths:
            end = int(np.searchsorted(dist, dist[start] + length, "left"))
            if end >= n or end <= start:
                continue
            gt_rel = ground_truth[start].inverse().compose(ground_truth[end])
            est_rel = estimated[start].inverse().compose(estimated[end])
            err = gt_rel.inverse().compose(est_rel)
            out.append(SegmentError(
                first_frame=start,
                length=length,
                t_err=float(np.linalg.norm(err.translation)) / length,
                r_err=rotation_angle(err.rotation) / length,
            ))
    return out


def build_report(segments: Sequence[SegmentError]) -> EvalReport:
    """Aggregate segment errors two ways.

    overall_* is the mean over all segments (each segment counts once);
    by_length_* first averages within each length, then across lengths.
    """
    per_length: dict[float, tuple[float, float, int]] = {}
    for length in sorted({s.length for s in segments}):
        group = [s for s in segments if s.length == length]
        per_length[length] = (
            float(np.mean([s.t_err for s in group])),
            float(np.mean([s.r_err for s in group])),
            len(group),
        )
    if segments:
        overall_t = float(np.mean([s.t_err for s in segments]))
        overall_r = float(np.mean([s.r_err for s in segments]))
        by_len_t = float(np.mean([v[0] for v in per_length.values()]))
        by_len_r = float(np.mean([v[1] for v in per_length.values()]))
    else:
        overall_t = overall_r = by_len_t = by_len_r = float("nan")
    return EvalReport(per_length=per_length, overall_t_err=overall_t,
                      overall_r_err=overall_r, by_length_t_err=by_len_t,
                      by_length_r_err=by_len_r, segment_count=len(segments))


def write_report(path, report: EvalReport, method: str = "-",
                 scope: str = "-") -> None:
    """Per-length CSV rows; t as percent, r as degrees per meter."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("method,scope,length_m,t_err_pct,r_err_deg_per_m\n")
        for length, (t_err, r_err, _) in sorted(report.per_length.items()):
            fh.write(f"{method},{scope},{length:.17g},"
                     f"{100.0 * t_err:.17g},{np.degrees(r_err):.17g}\n")


def format_summary(report: EvalReport, method: str = "-",
                   scope: str = "-") -> str:
    lines = [f"method: {method}", f"scope: {scope}",
             f"segments: {report.segment_count}"]
    if report.segment_count:
        lines += [
            "mean over all segments: "
            f"t {100.0 * report.overall_t_err:.6f}% | "
            f"r {np.degrees(report.overall_r_err):.8f} deg/m",
            "mean of per-length means: "
            f"t {100.0 * report.by_length_t_err:.6f}% | "
            f"r {np.degrees(report.by_length_r_err):.8f} deg/m",
        ]
    else:
        lines.append("no segment was long enough to evaluate")
    return "\n".join(lines) + "\n"


def timing_report(samples: Mapping[str, Sequence[float]]
                  ) -> dict[str, StageTiming]:
    """Stage statistics from wall-clock samples in seconds, stats in ms."""
    out: dict[str, StageTiming] = {}
    for stage, values in samples.items():
        ms = 1e3 * np.asarray(list(values), dtype=float)
        if ms.size == 0:
            raise ValueError(f"stage {stage!r} has no samples")
        out[stage] = StageTiming(
            mean_ms=float(np.mean(ms)),
            median_ms=float(np.median(ms)),
            std_ms=float(np.std(ms)),
            count=int(ms.size),
        )
    return out
