"""Frame-pair processing: triangulate, weight, initialize, refine, chain.

The estimated motion X of a pair maps previous-frame points into the
current frame; the camera itself moves by inverse(X), which is what gets
chained into the camera-to-world trajectory (frame 0 = identity).
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientCorrespondences, StereoVoError
from .geometry import (Point3, Pose, StereoCalibration, StereoMeasurement,
                       triangulate)
from .noise_models import PseudoHuber
from .robust_init import Hypothesis, InitConfig, erode_init, hypothesize_and_test
from .refinement import RefinementScope, refine


@dataclass(frozen=True)
class Correspondence:
    """One tracked feature: measurement, its back-projection and a weight.

    point must be the triangulation of the previous-frame observation of z;
    weight >= 0 scales this measurement's share of every cost (1 = neutral).
    """

    z: StereoMeasurement
    point: Point3
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.weight < 0.0:
            raise ValueError("weight must be non-negative")


@dataclass(frozen=True)
class LabeledCorrespondence(Correspondence):
    """Correspondence with synthetic ground-truth annotations."""

    is_outlier: bool = False
    true_point: Point3 | None = None


@dataclass(frozen=True)
class FramePair:
    """All correspondences between consecutive frames (k-1, k).

    frame_index is k, the index of the current frame; the first pair of a
    sequence has frame_index 1.
    """

    frame_index: int
    correspondences: tuple[Correspondence, ...]

    def __len__(self) -> int:
        return len(self.correspondences)


@dataclass(frozen=True)
class Trajectory:
    """Camera-to-world poses, one per frame, first frame = identity."""

    poses: tuple[Pose, ...]

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i) -> Pose:
        return self.poses[i]

    def positions(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])


@dataclass(frozen=True)
class RunConfig:
    """Method selection for sequence processing."""

    init: InitConfig
    scope: RefinementScope = RefinementScope.MOTION_ONLY
    weighting: bool = False


def viso2_weight(ul, u0: float):
    """Horizontal-distance weight 1 / (|ul - u0| / u0 + 0.05).

    Down-weights features near the lateral image borders, where rectified
    calibration is least trustworthy; peaks at 20 on the principal column.
    """
    ul = np.asarray(ul, dtype=float)
    out = 1.0 / (np.abs(ul - u0) / u0 + 0.05)
    return float(out) if out.ndim == 0 else out


def prepare_correspondences(pair: FramePair, calib: StereoCalibration,
                            weighting: bool) -> list[Correspondence]:
    """Re-triangulate and (optionally) weight a pair's measurements.

    Triangulation is recomputed from the stored measurements so the
    point-matches-measurement invariant holds regardless of how the pair was
    built. Weighting applies the previous-frame left column distance rule.
    """
    out = []
    for c in pair.correspondences:
        w = viso2_weight(c.z.ul_prev, calib.u0) if weighting else 1.0
        out.append(Correspondence(z=c.z, point=triangulate(c.z, calib),
                                  weight=float(w)))
    return out


def _run_init(correspondences, calib, config: InitConfig) -> Hypothesis:
    if isinstance(config.model, PseudoHuber):
        return erode_init(correspondences, calib, b=config.model.b,
                          threshold=config.model.threshold)
    return hypothesize_and_test(correspondences, calib, config)


def process_pair(pair: FramePair, calib: StereoCalibration,
                 init_config: InitConfig,
                 scope: RefinementScope = RefinementScope.MOTION_ONLY,
                 weighting: bool = False):
    """Estimate the camera displacement across one frame pair.

    Returns (relative_pose, diagnostics): relative_pose is the camera
    motion inverse(X) to chain into a trajectory; diagnostics is a dict of
    deterministic per-pair fields plus a "timings" sub-dict of wall-clock
    stage durations in seconds (the only non-deterministic entries).

    Initializer and refiner errors propagate to the caller; sequence-level
    drivers turn them into identity motions with a failure flag.
    """
    t0 = time.perf_counter()
    correspondences = prepare_correspondences(pair, calib, weighting)
    t1 = time.perf_counter()
    hypothesis = _run_init(correspondences, calib, init_config)
    t2 = time.perf_counter()
    inliers = [c for c, keep in zip(correspondences, hypothesis.inlier_mask)
               if keep]
    if len(inliers) < 4:
        raise InsufficientCorrespondences(
            f"only {len(inliers)} inliers survive initialization")
    result = refine(scope, hypothesis.pose, inliers, calib)
    t3 = time.perf_counter()

    diagnostics = {
        "frame_index": pair.frame_index,
        "n_correspondences": len(correspondences),
        "n_inliers": int(np.count_nonzero(hypothesis.inlier_mask)),
        "threshold": hypothesis.adaptive_threshold,
        "init_score": hypothesis.score,
        "degenerate_samples": hypothesis.degenerate_samples,
        "gamma": hypothesis.gamma,
        "initial_cost": result.initial_cost,
        "final_cost": result.final_cost,
        "refine_iterations": result.iterations,
        "refine_status": result.status,
        "failed": False,
        "error": "",
        "timings": {
            "triangulate_s": t1 - t0,
            "init_s": t2 - t1,
            "refine_s": t3 - t2,
        },
    }
    return result.pose.inverse(), diagnostics


def _failure_diagnostics(pair: FramePair, exc: Exception) -> dict:
    return {
        "frame_index": pair.frame_index,
        "n_correspondences": len(pair),
        "n_inliers": 0,
        "threshold": float("nan"),
        "init_score": float("nan"),
        "degenerate_samples": 0,
        "gamma": None,
        "initial_cost": float("nan"),
        "final_cost": float("nan"),
        "refine_iterations": 0,
        "refine_status": "failed",
        "failed": True,
        "error": f"{type(exc).__name__}: {exc}",
        "timings": {"triangulate_s": 0.0, "init_s": 0.0, "refine_s": 0.0},
    }


def process_sequence(pairs, calib: StereoCalibration, config: RunConfig):
    """Chain per-pair motions into a camera-to-world trajectory.

    Returns (Trajectory, diagnostics list). A pair whose estimation fails
    contributes an identity motion and a flagged diagnostics row; processing
    continues with the next pair.
    """
    poses = [Pose.identity()]
    diagnostics = []
    for pair in pairs:
        try:
            relative, diag = process_pair(pair, calib, config.init,
                                          config.scope, config.weighting)
        except StereoVoError as exc:
            relative = Pose.identity()
            diag = _failure_diagnostics(pair, exc)
        poses.append(poses[-1].compose(relative))
        diagnostics.append(diag)
    return Trajectory(tuple(poses)), diagnostics
