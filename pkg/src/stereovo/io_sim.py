"""Synthetic stereo scenes with exact ground truth, plus on-disk formats.

Formats (all documented in the README):

* poses: one line per frame, 12 space-separated floats, the row-major top
  3x4 of the camera-to-world transform (KITTI pose convention), printed with
  %.17g so values round-trip exactly.
* correspondences: CSV with header
  frame_index,ul_prev,ur_prev,v_prev,ul_cur,ur_cur,v_cur; rows grouped by
  non-decreasing frame_index, one group per frame pair.
* labels: CSV with header frame_index,is_outlier,true_x,true_y,true_z, rows
  aligned with the correspondence rows of the same frame_index.
* config: versioned JSON with "calibration" and "scene" sections.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import FrustumEmpty, InvalidConfig, MalformedFile
from .geometry import (Point3, Pose, StereoCalibration, StereoMeasurement,
                       so3_exp, triangulate)
from .pipeline import (Correspondence, FramePair, LabeledCorrespondence,
                       Trajectory)

DEFAULT_CALIBRATION = StereoCalibration(
    focal=718.856, u0=607.19, v0=185.22, baseline=0.537,
    image_width=1241.0, image_height=376.0, disparity_range=128.0)

CONFIG_VERSION = 1
_MAX_SAMPLE_ROUNDS = 200
_MIN_NOISY_DISPARITY = 1e-3

CORRESPONDENCE_HEADER = ("frame_index,ul_prev,ur_prev,v_prev,"
                         "ul_cur,ur_cur,v_cur")
LABEL_HEADER = "frame_index,is_outlier,true_x,true_y,true_z"


@dataclass(frozen=True)
class SceneConfig:
    """Knobs of the synthetic generator.

    noise_sigma is the pixel standard deviation of the i.i.d. Gaussian
    measurement noise, either one value for all six components or a
    (sigma_u, sigma_v) pair applied to horizontal/vertical coordinates.
    outlier_ratio is a per-point Bernoulli probability; an outlier keeps its
    (noisy) previous-frame observation and draws the current-frame one
    uniformly over image area times disparity range. frame_count counts
    frames, so frame_count - 1 pairs are generated.
    """

    point_count: int = 200
    depth_range: tuple[float, float] = (5.0, 50.0)
    noise_sigma: float | tuple[float, float] = 0.0
    outlier_ratio: float = 0.0
    translation_mag: float = 1.0
    rotation_mag_deg: float = 1.0
    frame_count: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.point_count < 1:
            raise ValueError("point_count must be positive")
        zmin, zmax = self.depth_range
        if not (0.0 < zmin < zmax):
            raise ValueError("depth_range must satisfy 0 < zmin < zmax")
        su, sv = self.sigma_uv()
        if su < 0.0 or sv < 0.0:
            raise ValueError("noise_sigma must be non-negative")
        if not (0.0 <= self.outlier_ratio < 1.0):
            raise ValueError("outlier_ratio must lie in [0, 1)")
        if self.translation_mag < 0.0 or self.rotation_mag_deg < 0.0:
            raise ValueError("motion magnitudes must be non-negative")
        if self.frame_count < 0:
            raise ValueError("frame_count must be non-negative")

    def sigma_uv(self) -> tuple[float, float]:
        if isinstance(self.noise_sigma, tuple):
            return float(self.noise_sigma[0]), float(self.noise_sigma[1])
        return float(self.noise_sigma), float(self.noise_sigma)


def _sample_motion(scene: SceneConfig, rng: np.random.Generator) -> Pose:
    """Ground-truth motion X (previous-frame points -> current frame).

    The camera displacement has exactly translation_mag meters of forward-
    biased translation and rotation_mag_deg degrees of rotation about a
    random axis; X is the inverse of that displacement.
    """
    direction = np.array([0.15 * rng.standard_normal(),
                          0.15 * rng.standard_normal(), 1.0])
    direction /= np.linalg.norm(direction)
    t = scene.translation_mag * direction
    axis = rng.standard_normal(3)
    norm = np.linalg.norm(axis)
    axis = axis / norm if norm > 0.0 else np.array([0.0, 0.0, 1.0])
    angle = np.deg2rad(scene.rotation_mag_deg)
    displacement = Pose(so3_exp(axis * angle), t)
    return displacement.inverse()


def _project_all(points: np.ndarray, calib: StereoCalibration):
    """(ul, ur, v) rows plus an in-frustum mask; no exceptions."""
    z = points[:, 2]
    ok = z > 1e-6
    zs = np.where(ok, z, 1.0)
    iz = calib.focal / zs
    ul = iz * points[:, 0] + calib.u0
    ur = iz * (points[:, 0] - calib.baseline) + calib.u0
    v = iz * points[:, 1] + calib.v0
    disparity = ul - ur
    ok &= (ul >= 0.0) & (ul <= calib.image_width)
    ok &= (ur >= 0.0) & (ur <= calib.image_width)
    ok &= (v >= 0.0) & (v <= calib.image_height)
    ok &= (disparity > 0.0) & (disparity <= calib.disparity_range)
    return np.column_stack([ul, ur, v]), ok


def _sample_visible_points(scene: SceneConfig, calib: StereoCalibration,
                           motion: Pose, rng: np.random.Generator):
    """Previous-frame points whose true projections fit both frusta."""
    needed = scene.point_count
    zmin, zmax = scene.depth_range
    collected = []
    total = 0
    for _ in range(_MAX_SAMPLE_ROUNDS):
        m = max(4 * needed, 64)
        u = rng.uniform(0.0, calib.image_width, m)
        v = rng.uniform(0.0, calib.image_height, m)
        z = rng.uniform(zmin, zmax, m)
        x = (u - calib.u0) * z / calib.focal
        y = (v - calib.v0) * z / calib.focal
        pts = np.column_stack([x, y, z])
        _, ok_prev = _project_all(pts, calib)
        _, ok_cur = _project_all(motion.apply(pts), calib)
        good = pts[ok_prev & ok_cur]
        if good.shape[0]:
            collected.append(good)
            total += good.shape[0]
        if total >= needed:
            return np.vstack(collected)[:needed]
    raise FrustumEmpty("could not sample points visible in both frames; "
                       "reduce the motion or widen the depth range")


def generate_pair(scene: SceneConfig, calib: StereoCalibration,
                  rng, frame_index: int = 1, motion: Pose | None = None):
    """One synthetic frame pair; returns (FramePair, ground-truth motion X).

    rng is a numpy Generator or a seed for one. Correspondence points are
    triangulated from the noisy measurements (matching the estimator's
    view); exact coordinates live in the labels.
    """
    rng = np.random.default_rng(rng)
    if motion is None:
        motion = _sample_motion(scene, rng)
    points_prev = _sample_visible_points(scene, calib, motion, rng)
    n = points_prev.shape[0]
    obs_prev, _ = _project_all(points_prev, calib)
    obs_cur, _ = _project_all(motion.apply(points_prev), calib)

    su, sv = scene.sigma_uv()
    scale = np.array([su, su, sv, su, su, sv])
    noisy = np.hstack([obs_prev, obs_cur]) + rng.standard_normal((n, 6)) * scale

    # outliers: replace the current-frame triple with a uniform draw
    is_outlier = rng.random(n) < scene.outlier_ratio
    ul_out = rng.uniform(0.0, calib.image_width, n)
    v_out = rng.uniform(0.0, calib.image_height, n)
    d_out = rng.uniform(0.0, calib.disparity_range, n)
    noisy[is_outlier, 3] = ul_out[is_outlier]
    noisy[is_outlier, 4] = ul_out[is_outlier] - d_out[is_outlier]
    noisy[is_outlier, 5] = v_out[is_outlier]

    # keep every row triangulatable: redraw prev-frame noise on the rare
    # rows whose noisy disparity collapsed
    for _ in range(100):
        bad = noisy[:, 0] - noisy[:, 1] < _MIN_NOISY_DISPARITY
        if not np.any(bad):
            break
        k = int(np.count_nonzero(bad))
        noisy[bad, :3] = obs_prev[bad] + rng.standard_normal((k, 3)) * scale[:3]

    correspondences = []
    for i in range(n):
        z = StereoMeasurement(*noisy[i])
        correspondences.append(LabeledCorrespondence(
            z=z, point=triangulate(z, calib), weight=1.0,
            is_outlier=bool(is_outlier[i]),
            true_point=Point3.from_array(points_prev[i])))
    return FramePair(frame_index, tuple(correspondences)), motion


def generate_sequence(scene: SceneConfig, calib: StereoCalibration):
    """All frame pairs of a scene; returns (pairs, ground-truth Trajectory).

    The trajectory holds scene.frame_count camera-to-world poses (frame 0 is
    identity); pair k connects frames (k-1, k).
    """
    n_pairs = max(0, scene.frame_count - 1)
    children = np.random.SeedSequence(scene.seed).spawn(max(n_pairs, 1))
    pairs = []
    poses = [Pose.identity()] if scene.frame_count > 0 else []
    for k in range(1, n_pairs + 1):
        rng = np.random.default_rng(children[k - 1])
        pair, motion = generate_pair(scene, calib, rng, frame_index=k)
        pairs.append(pair)
        poses.append(poses[-1].compose(motion.inverse()))
    return pairs, Trajectory(tuple(poses))


def write_poses(path, trajectory: Trajectory) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pose in trajectory.poses:
            vals = pose.matrix34().reshape(-1)
            fh.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def read_poses(path) -> Trajectory:
    """Parse a pose file; re-orthonormalizes drifted rotations with a warning.

    Raises MalformedFile with the offending line number for wrong field
    counts or unparseable numbers.
    """
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 12:
                raise MalformedFile(f"{path}: line {lineno}: expected 12 "
                                    f"fields, got {len(fields)}")
            try:
                vals = np.array([float(x) for x in fields])
            except ValueError as exc:
                raise MalformedFile(f"{path}: line {lineno}: {exc}") from exc
            m = vals.reshape(3, 4)
            R, t = m[:, :3], m[:, 3]
            err = float(np.max(np.abs(R.T @ R - np.eye(3))))
            if err > 1e-9:
                if err > 1e-6:
                    warnings.warn(f"{path}: line {lineno}: rotation deviates "
                                  f"from orthonormal by {err:.3g}; "
                                  "re-orthonormalized")
                U, _, Vt = np.linalg.svd(R)
                R = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))]) @ Vt
            poses.append(Pose(R, t))
    return Trajectory(tuple(poses))


def write_correspondences(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CORRESPONDENCE_HEADER + "\n")
        for pair in pairs:
            for c in pair.correspondences:
                row = c.z.as_array()
                fh.write(str(pair.frame_index) + ","
                         + ",".join(f"{v:.17g}" for v in row) + "\n")


def read_correspondences(path, calib: StereoCalibration) -> list[FramePair]:
    """Parse a correspondence file into frame pairs.

    Points are triangulated from the previous-frame observations on read.
    Raises MalformedFile (with row numbers) for a wrong header, wrong field
    counts, non-positive previous-frame disparity, or frame indices that
    decrease.
    """
    pairs: list[FramePair] = []
    current: list[Correspondence] = []
    current_index: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != CORRESPONDENCE_HEADER:
            raise MalformedFile(f"{path}: bad header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.strip().split(",")
            if len(fields) != 7:
                raise MalformedFile(f"{path}: line {lineno}: expected 7 "
                                    f"fields, got {len(fields)}")
            try:
                frame_index = int(fields[0])
                vals = [float(x) for x in fields[1:]]
            except ValueError as exc:
                raise MalformedFile(f"{path}: line {lineno}: {exc}") from exc
            z = StereoMeasurement(*vals)
            if z.ul_prev - z.ur_prev <= 0.0:
                raise MalformedFile(f"{path}: line {lineno}: non-positive "
                                    "previous-frame disparity")
            if current_index is not None and frame_index < current_index:
                raise MalformedFile(f"{path}: line {lineno}: frame indices "
                                    "must be non-decreasing")
            if frame_index != current_index:
                if current:
                    pairs.append(FramePair(current_index, tuple(current)))
                current = []
                current_index = frame_index
            current.append(Correspondence(z=z, point=triangulate(z, calib)))
    if current:
        pairs.append(FramePair(current_index, tuple(current)))
    return pairs


def write_labels(path, pairs) -> None:
    """Ground-truth annotations, rows aligned with write_correspondences."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LABEL_HEADER + "\n")
        for pair in pairs:
            for c in pair.correspondences:
                if not isinstance(c, LabeledCorrespondence):
                    raise ValueError("labels require LabeledCorrespondence")
                p = c.true_point.as_array()
                fh.write(f"{pair.frame_index},{int(c.is_outlier)},"
                         + ",".join(f"{v:.17g}" for v in p) + "\n")


def read_labels(path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """frame_index -> (is_outlier bool array, true points (N, 3))."""
    out: dict[int, tuple[list, list]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != LABEL_HEADER:
            raise MalformedFile(f"{path}: bad header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.strip().split(",")
            if len(fields) != 5:
                raise MalformedFile(f"{path}: line {lineno}: expected 5 "
                                    f"fields, got {len(fields)}")
            idx = int(fields[0])
            flags, points = out.setdefault(idx, ([], []))
            flags.append(bool(int(fields[1])))
            points.append([float(x) for x in fields[2:]])
    return {k: (np.array(f, dtype=bool), np.array(p))
            for k, (f, p) in out.items()}


_CALIB_FIELDS = ("focal", "u0", "v0", "baseline", "image_width",
                 "image_height", "disparity_range")
_SCENE_REQUIRED = ("point_count", "frame_count", "seed")
_SCENE_OPTIONAL = {
    "depth_min": 5.0, "depth_max": 50.0, "noise_sigma": 0.0,
    "noise_sigma_v": None, "outlier_ratio": 0.0, "translation_mag": 1.0,
    "rotation_mag_deg": 1.0,
}


def load_calibration(obj) -> StereoCalibration:
    """Build a StereoCalibration from a config mapping (one section)."""
    extra = set(obj) - set(_CALIB_FIELDS) - {"real_calibration"}
    if extra:
        raise InvalidConfig(f"unknown calibration fields: {sorted(extra)}")
    missing = [f for f in _CALIB_FIELDS if f not in obj]
    if missing:
        raise InvalidConfig(f"missing calibration fields: {missing}")
    try:
        return StereoCalibration(**{f: float(obj[f]) for f in _CALIB_FIELDS})
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"bad calibration: {exc}") from exc


def load_config(path):
    """Parse a simulation config; returns (SceneConfig, StereoCalibration)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise InvalidConfig(f"{path}: top level must be an object")
    if obj.get("version") != CONFIG_VERSION:
        raise InvalidConfig(f"{path}: missing or unsupported version "
                            f"(expected {CONFIG_VERSION})")
    extra = set(obj) - {"version", "calibration", "scene"}
    if extra:
        raise InvalidConfig(f"{path}: unknown sections: {sorted(extra)}")
    for section in ("calibration", "scene"):
        if section not in obj:
            raise InvalidConfig(f"{path}: missing section '{section}'")
    calib = load_calibration(obj["calibration"])
    scene_obj = dict(obj["scene"])
    extra = set(scene_obj) - set(_SCENE_REQUIRED) - set(_SCENE_OPTIONAL)
    if extra:
        raise InvalidConfig(f"{path}: unknown scene fields: {sorted(extra)}")
    missing = [f for f in _SCENE_REQUIRED if f not in scene_obj]
    if missing:
        raise InvalidConfig(f"{path}: missing scene fields: {missing}")
    merged = dict(_SCENE_OPTIONAL)
    merged.update(scene_obj)
    sigma_v = merged.pop("noise_sigma_v")
    sigma = (float(merged["noise_sigma"]) if sigma_v is None
             else (float(merged["noise_sigma"]), float(sigma_v)))
    try:
        scene = SceneConfig(
            point_count=int(merged["point_count"]),
            depth_range=(float(merged["depth_min"]),
                         float(merged["depth_max"])),
            noise_sigma=sigma,
            outlier_ratio=float(merged["outlier_ratio"]),
            translation_mag=float(merged["translation_mag"]),
            rotation_mag_deg=float(merged["rotation_mag_deg"]),
            frame_count=int(merged["frame_count"]),
            seed=int(merged["seed"]),
        )
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"{path}: bad scene: {exc}") from exc
    return scene, calib


def save_config(path, scene: SceneConfig, calib: StereoCalibration) -> None:
    su, sv = scene.sigma_uv()
    isotropic = not isinstance(scene.noise_sigma, tuple)
    obj = {
        "version": CONFIG_VERSION,
        "calibration": {f: getattr(calib, f) for f in _CALIB_FIELDS},
        "scene": {
            "point_count": scene.point_count,
            "depth_min": scene.depth_range[0],
            "depth_max": scene.depth_range[1],
            "noise_sigma": su,
            "noise_sigma_v": None if isotropic else sv,
            "outlier_ratio": scene.outlier_ratio,
            "translation_mag": scene.translation_mag,
            "rotation_mag_deg": scene.rotation_mag_deg,
            "frame_count": scene.frame_count,
            "seed": scene.seed,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
