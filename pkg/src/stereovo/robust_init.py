"""Robust motion initialization: consensus sampling and a direct variant.

hypothesize_and_test() draws minimal samples (4 points, P3P plus a
disambiguating 4th), scores every hypothesis under the configured noise
model and keeps the best. All scorers share one deterministic sample stream:
two configs with equal seeds see identical samples regardless of the model,
so method comparisons isolate the scoring rule.

erode_init() skips sampling entirely: it runs a Pseudo-Huber robustified
motion-only refinement from the identity pose and classifies inliers against
a fixed threshold afterwards. Cheap and accurate for small inter-frame
motion; it is allowed to fail for large motions where identity is a poor
start.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import (AllHypothesesDegenerate, DegenerateSample,
                     InsufficientCorrespondences, NoValidModel)
from .geometry import MIN_DEPTH, Pose, StereoCalibration, pnp_minimal
from .noise_models import (DEFAULT_INLIER_THRESHOLD, AcRansac, Amlesac,
                           Mlesac, Msac, NoiseModel, PseudoHuber, Ransac,
                           amlesac_estimate, best_nfa, mlesac_estimate_gamma,
                           total_cost)
from .refinement import RefinementScope, refine

MIN_SAMPLE_SIZE = 4


@dataclass(frozen=True)
class InitConfig:
    """Settings for hypothesize_and_test.

    inlier_threshold classifies inliers for models that carry no threshold
    of their own (Mlesac/Amlesac); None means the 2.79 px default. The
    minimal solver consumes exactly four correspondences.
    """

    model: NoiseModel
    iterations: int = 1000
    seed: int = 0
    min_sample_size: int = MIN_SAMPLE_SIZE
    inlier_threshold: float | None = None

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.min_sample_size != MIN_SAMPLE_SIZE:
            raise ValueError("the minimal solver requires samples of 4")
        if self.inlier_threshold is not None and self.inlier_threshold <= 0.0:
            raise ValueError("inlier_threshold must be positive")


@dataclass(frozen=True)
class Hypothesis:
    """Best pose found by an initializer plus its classification.

    score semantics depend on the model (outlier mass, truncated cost,
    mixture negative log-likelihood, log-NFA, robust refinement cost);
    lower is always better. adaptive_threshold is the model threshold used
    for inlier_mask; for AcRansac it is the data-driven one. gamma/cov are
    populated by the mixture models (Mlesac reports its configured
    covariance, Amlesac the per-hypothesis optimized one).
    """

    pose: Pose
    score: float
    inlier_mask: np.ndarray
    adaptive_threshold: float
    gamma: float | None = None
    cov: np.ndarray | None = None
    degenerate_samples: int = 0


def sample_indices(seed: int, n: int, iterations: int,
                   k: int = MIN_SAMPLE_SIZE) -> list[np.ndarray]:
    """The deterministic minimal-sample draws for a given seed.

    Pure function of (seed, n, iterations, k): every scorer consuming this
    stream sees the same samples. Each iteration gets an independent child
    generator so samples do not shift when a scorer is swapped.
    """
    children = np.random.SeedSequence(seed).spawn(iterations)
    return [np.random.default_rng(c).choice(n, size=k, replace=False)
            for c in children]


def _stereo_errors_d3(pose: Pose, points, z_cur, calib) -> np.ndarray:
    """Current-frame residual vectors; rows behind the camera become +inf."""
    p = points @ pose.rotation.T + pose.translation
    ok = p[:, 2] > MIN_DEPTH
    z = np.where(ok, p[:, 2], 1.0)
    iz = calib.focal / z
    proj = np.column_stack([iz * p[:, 0] + calib.u0,
                            iz * (p[:, 0] - calib.baseline) + calib.u0,
                            iz * p[:, 1] + calib.v0])
    e = z_cur - proj
    e[~ok] = np.inf
    return e


def _sqnorms(pose: Pose, points, z_cur, calib) -> np.ndarray:
    return kernels.reprojection_sqnorms(
        pose.rotation, pose.translation, points, z_cur,
        calib.focal, calib.baseline, calib.u0, calib.v0)


def _make_scorer(model: NoiseModel, points, z_cur, weights, calib, n: int,
                 ns: int):
    """Returns score_fn(pose) -> (score, extra); lower scores win."""
    if isinstance(model, Ransac):
        t2 = model.threshold ** 2

        def score(pose):
            sq = _sqnorms(pose, points, z_cur, calib)
            return kernels.ransac_outlier_total(sq, t2, weights), None
    elif isinstance(model, Msac):
        t2 = model.threshold ** 2

        def score(pose):
            sq = _sqnorms(pose, points, z_cur, calib)
            return kernels.msac_total(sq, t2, weights), None
    elif isinstance(model, Amlesac):
        def score(pose):
            e = _stereo_errors_d3(pose, points, z_cur, calib)
            gamma, cov = amlesac_estimate(e, model.cov, model.nu, model.gamma)
            scored = Amlesac(cov=cov, nu=model.nu, gamma=gamma)
            return total_cost(scored, e, weights).data_cost, (gamma, cov)
    elif isinstance(model, Mlesac):
        def score(pose):
            e = _stereo_errors_d3(pose, points, z_cur, calib)
            gamma = mlesac_estimate_gamma(e, model.cov, model.nu, model.gamma)
            scored = replace(model, gamma=gamma)
            return total_cost(scored, e, weights).data_cost, (gamma, model.cov)
    elif isinstance(model, AcRansac):
        # NFA is count-based; per-point weights do not enter it
        def score(pose):
            sq = _sqnorms(pose, points, z_cur, calib)
            norms = np.sort(np.sqrt(sq))
            _, log_nfa, threshold = best_nfa(norms, n, ns, model.dim,
                                             model.alpha0, epsilon=None)
            return log_nfa, threshold
    else:
        raise TypeError(f"{type(model).__name__} is not a sampling-consensus "
                        "model")
    return score


def hypothesize_and_test(correspondences, calib: StereoCalibration,
                         config: InitConfig) -> Hypothesis:
    """Best-scoring motion hypothesis over config.iterations minimal samples.

    Degenerate samples (collinear points, no admissible P3P root) are
    counted and skipped but still consume their iteration and its random
    draw. Ties keep the first hypothesis found. Raises
    AllHypothesesDegenerate when no sample yields a pose and NoValidModel
    when an AcRansac search ends with min NFA above epsilon.
    """
    model = config.model
    n = len(correspondences)
    ns = config.min_sample_size
    needed = ns + 1 if isinstance(model, AcRansac) else ns
    if n < needed:
        raise InsufficientCorrespondences(
            f"need at least {needed} correspondences, got {n}")
    if isinstance(model, AcRansac) and model.min_sample != ns:
        raise ValueError("AcRansac.min_sample must match min_sample_size")

    points = np.stack([c.point.as_array() for c in correspondences])
    z_cur = np.stack([c.z.cur() for c in correspondences])
    pixels = z_cur[:, [0, 2]]  # left-camera (ul, v) drives the minimal solver
    weights = np.array([c.weight for c in correspondences], dtype=float)

    score_fn = _make_scorer(model, points, z_cur, weights, calib, n, ns)

    best_pose = None
    best_score = np.inf
    best_extra = None
    degenerate = 0
    for idx in sample_indices(config.seed, n, config.iterations, ns):
        try:
            candidates = pnp_minimal(points[idx], pixels[idx], calib)
        except DegenerateSample:
            degenerate += 1
            continue
        if not candidates:
            degenerate += 1
            continue
        pose = candidates[0]
        score, extra = score_fn(pose)
        if np.isfinite(score) and score < best_score:
            best_pose, best_score, best_extra = pose, score, extra

    if best_pose is None:
        raise AllHypothesesDegenerate(
            f"all {config.iterations} samples were degenerate")

    sq = _sqnorms(best_pose, points, z_cur, calib)
    gamma = None
    cov = None
    if isinstance(model, AcRansac):
        if best_score > np.log(model.epsilon):
            raise NoValidModel(f"min log-NFA {best_score:.3g} exceeds "
                               f"log epsilon {np.log(model.epsilon):.3g}")
        threshold = float(best_extra)
        # the threshold is the q*-th error itself, so that point is included
        mask = np.sqrt(sq) <= threshold
    elif isinstance(model, (Ransac, Msac)):
        threshold = model.threshold
        mask = sq < threshold ** 2
    else:  # Mlesac / Amlesac classify against the configured threshold
        threshold = (config.inlier_threshold if config.inlier_threshold
                     is not None else DEFAULT_INLIER_THRESHOLD)
        mask = sq < threshold ** 2
        gamma, cov = best_extra

    return Hypothesis(pose=best_pose, score=float(best_score),
                      inlier_mask=mask, adaptive_threshold=float(threshold),
                      gamma=gamma, cov=cov, degenerate_samples=degenerate)


def erode_init(correspondences, calib: StereoCalibration, b: float = 2.0,
               threshold: float = DEFAULT_INLIER_THRESHOLD) -> Hypothesis:
    """Sample-free initialization: robust descent from the identity pose.

    Minimizes the Pseudo-Huber (shape b) motion-only cost starting at
    identity, then classifies inliers with the fixed threshold. The score is
    the final robust cost. Intended for small inter-frame motion; with a
    large motion the identity start may land in the wrong basin, which shows
    up as a low inlier count rather than an error.
    """
    if len(correspondences) < MIN_SAMPLE_SIZE:
        raise InsufficientCorrespondences(
            f"need at least {MIN_SAMPLE_SIZE} correspondences")
    model = PseudoHuber(b=b, threshold=threshold)
    result = refine(RefinementScope.MOTION_ONLY, Pose.identity(),
                    correspondences, calib, model=model)
    points = np.stack([c.point.as_array() for c in correspondences])
    z_cur = np.stack([c.z.cur() for c in correspondences])
    sq = _sqnorms(result.pose, points, z_cur, calib)
    mask = sq < threshold ** 2
    return Hypothesis(pose=result.pose, score=result.final_cost,
                      inlier_mask=mask, adaptive_threshold=float(threshold))
