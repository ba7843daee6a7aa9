"""Rigid transforms, rectified-stereo projection, triangulation and minimal PnP.

Conventions used throughout the package:

* A ``Pose`` maps points from its source frame into its target frame,
  ``p_target = R @ p_source + t``.
* The motion estimated between two stereo frames maps points expressed in the
  previous camera frame into the current one.
* Stereo rigs are rectified: the right camera is displaced by ``baseline``
  along +x of the left camera, both share focal length and principal point.
* A full stereo observation of one point in one frame is the triple
  ``(ul, ur, v)``: left/right horizontal pixel coordinates and the shared
  vertical coordinate.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import DegenerateSample, NonPositiveDisparity, PointBehindCamera

MIN_DEPTH = 1e-9
_AREA_TOL = 1e-8


@dataclass(frozen=True)
class StereoCalibration:
    """Rectified stereo rig intrinsics plus nominal sensor extents."""

    focal: float
    u0: float
    v0: float
    baseline: float
    image_width: float
    image_height: float
    disparity_range: float

    def __post_init__(self) -> None:
        if self.focal <= 0.0:
            raise ValueError("focal length must be positive")
        if self.baseline <= 0.0:
            raise ValueError("baseline must be positive")
        if self.disparity_range <= 0.0:
            raise ValueError("disparity range must be positive")
        if not (0.0 < self.u0 < self.image_width):
            raise ValueError("principal point u0 must lie inside the image")
        if not (0.0 < self.v0 < self.image_height):
            raise ValueError("principal point v0 must lie inside the image")


@dataclass(frozen=True)
class Point3:
    """A 3-D point in some camera frame (meters)."""

    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @classmethod
    def from_array(cls, a) -> "Point3":
        a = np.asarray(a, dtype=float).reshape(3)
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class StereoMeasurement:
    """One tracked feature: stereo observations in two consecutive frames."""

    ul_prev: float
    ur_prev: float
    v_prev: float
    ul_cur: float
    ur_cur: float
    v_cur: float

    def prev(self) -> np.ndarray:
        return np.array([self.ul_prev, self.ur_prev, self.v_prev])

    def cur(self) -> np.ndarray:
        return np.array([self.ul_cur, self.ur_cur, self.v_cur])

    def as_array(self) -> np.ndarray:
        return np.array([self.ul_prev, self.ur_prev, self.v_prev,
                         self.ul_cur, self.ur_cur, self.v_cur])


@dataclass(frozen=True)
class Pose:
    """Rigid transform p_target = rotation @ p_source + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be a 3x3 matrix")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
            raise ValueError("rotation matrix is not orthonormal")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        """Transform one (3,) point or a stack (..., 3) of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self*other).apply(p) == self.apply(other.apply(p))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, in radians.

    Uses atan2 of the skew-part norm against the trace: arccos of the
    trace alone cannot resolve angles below ~sqrt(eps).
    """
    R = np.asarray(R, dtype=float)
    s = 0.5 * np.sqrt((R[2, 1] - R[1, 2]) ** 2
                      + (R[0, 2] - R[2, 0]) ** 2
                      + (R[1, 0] - R[0, 1]) ** 2)
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arctan2(s, c))


def so3_exp(omega) -> np.ndarray:
    """Rodrigues' formula with a series fallback for small angles."""
    omega = np.asarray(omega, dtype=float).reshape(3)
    theta2 = float(omega @ omega)
    theta = np.sqrt(theta2)
    K = skew(omega)
    if theta < 1e-4:
        # sin(t)/t and (1-cos(t))/t^2 series
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R) -> np.ndarray:
    """Rotation vector of R; near pi the axis sign is chosen arbitrarily."""
    R = np.asarray(R, dtype=float)
    theta = rotation_angle(R)
    if theta < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
    if theta > np.pi - 1e-6:
        # sin(theta) ~ 0: recover the axis from R + I instead
        S = R + np.eye(3)
        k = int(np.argmax(np.diag(S)))
        axis = S[:, k] / np.linalg.norm(S[:, k])
        return theta * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w * (theta / (2.0 * np.sin(theta)))


def _so3_left_jacobian(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float).reshape(3)
    theta2 = float(omega @ omega)
    theta = np.sqrt(theta2)
    K = skew(omega)
    if theta < 1e-4:
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
        c = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
    else:
        b = (1.0 - np.cos(theta)) / theta2
        c = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + b * K + c * (K @ K)


def _so3_left_jacobian_inv(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float).reshape(3)
    theta2 = float(omega @ omega)
    theta = np.sqrt(theta2)
    K = skew(omega)
    if theta < 1e-2:
        # the closed form divides by 1 - cos(theta); its error grows like
        # eps / theta^2 in the output, so the series must carry this far
        c = 1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    else:
        c = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta2
    return np.eye(3) - 0.5 * K + c * (K @ K)


def se3_exp(twist) -> Pose:
    """Exponential map; twist layout is [translation part, rotation part]."""
    twist = np.asarray(twist, dtype=float).reshape(6)
    rho, omega = twist[:3], twist[3:]
    R = so3_exp(omega)
    t = _so3_left_jacobian(omega) @ rho
    return Pose(R, t)


def se3_log(pose: Pose) -> np.ndarray:
    omega = so3_log(pose.rotation)
    rho = _so3_left_jacobian_inv(omega) @ pose.translation
    return np.concatenate([rho, omega])


def stereo_project(pose: Pose, point, calib: StereoCalibration) -> np.ndarray:
    """Project a source-frame point through pose into (ul, ur, v).

    Raises PointBehindCamera when the transformed depth is not positive.
    """
    if isinstance(point, Point3):
        point = point.as_array()
    p = pose.apply(point)
    if p[2] <= MIN_DEPTH:
        raise PointBehindCamera(f"depth {p[2]:.3g} is not positive")
    iz = calib.focal / p[2]
    return np.array([iz * p[0] + calib.u0,
                     iz * (p[0] - calib.baseline) + calib.u0,
                     iz * p[1] + calib.v0])


def stereo_project_many(pose: Pose, points, calib: StereoCalibration) -> np.ndarray:
    """Vectorized stereo_project for an (N, 3) stack of points."""
    p = pose.apply(np.asarray(points, dtype=float).reshape(-1, 3))
    if np.any(p[:, 2] <= MIN_DEPTH):
        raise PointBehindCamera("at least one point has non-positive depth")
    iz = calib.focal / p[:, 2]
    return np.column_stack([iz * p[:, 0] + calib.u0,
                            iz * (p[:, 0] - calib.baseline) + calib.u0,
                            iz * p[:, 1] + calib.v0])


def triangulate(measurement: StereoMeasurement, calib: StereoCalibration) -> Point3:
    """Back-project the previous-frame stereo observation of a measurement."""
    disparity = measurement.ul_prev - measurement.ur_prev
    if disparity <= 0.0:
        raise NonPositiveDisparity(f"disparity {disparity:.3g} is not positive")
    z = calib.focal * calib.baseline / disparity
    x = (measurement.ul_prev - calib.u0) * z / calib.focal
    y = (measurement.v_prev - calib.v0) * z / calib.focal
    return Point3(x, y, z)


def triangulate_many(prev_obs, calib: StereoCalibration) -> np.ndarray:
    """Vectorized back-projection of (N, 3) previous-frame (ul, ur, v) rows."""
    obs = np.asarray(prev_obs, dtype=float).reshape(-1, 3)
    disparity = obs[:, 0] - obs[:, 1]
    if np.any(disparity <= 0.0):
        raise NonPositiveDisparity("at least one row has non-positive disparity")
    z = calib.focal * calib.baseline / disparity
    x = (obs[:, 0] - calib.u0) * z / calib.focal
    y = (obs[:, 2] - calib.v0) * z / calib.focal
    return np.column_stack([x, y, z])


def _normalized_area(p0, p1, p2) -> float:
    """Triangle area divided by its longest side squared (scale invariant)."""
    sides = (p1 - p0, p2 - p0, p2 - p1)
    longest2 = max(float(s @ s) for s in sides)
    if longest2 <= 0.0:
        return 0.0
    area = 0.5 * np.linalg.norm(np.cross(sides[0], sides[1]))
    return float(area / longest2)


def _absolute_orientation(src, dst):
    """Least-squares R, t with dst_i ~ R @ src_i + t (SVD, det-corrected)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def _grunert_quartic(a2, b2, c2, ca, cb, cg):
    """Quartic in v = s3/s1 from the three law-of-cosines constraints.

    Built by polynomial elimination instead of transcribed closed-form
    coefficients: with u = s2/s1,
        G(v) = (k-1) v^2 - 2 k cb v + (k+1),   k = (a2-c2)/b2
        H(v) = 2 (cg - ca v)
        u = G / H,
    and substituting into 1 + u^2 - 2 u cg - q (1 + v^2 - 2 cb v) = 0
    (q = c2/b2) multiplied through by H^2 gives the quartic.
    """
    k = (a2 - c2) / b2
    q = c2 / b2
    G = np.array([k - 1.0, -2.0 * k * cb, k + 1.0])
    H = np.array([-2.0 * ca, 2.0 * cg])
    T = np.array([-q, 2.0 * q * cb, 1.0 - q])
    poly = np.polyadd(np.polymul(G, G), np.polymul(T, np.polymul(H, H)))
    poly = np.polyadd(poly, -2.0 * cg * np.polymul(G, H))
    return poly, G, H


def _polish_distances(s, a2, b2, c2, ca, cb, cg):
    """A couple of Newton steps on the law-of-cosines system in (s1,s2,s3)."""
    for _ in range(3):
        s1, s2, s3 = s
        F = np.array([
            s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * ca - a2,
            s1 * s1 + s3 * s3 - 2.0 * s1 * s3 * cb - b2,
            s1 * s1 + s2 * s2 - 2.0 * s1 * s2 * cg - c2,
        ])
        J = np.array([
            [0.0, 2.0 * s2 - 2.0 * s3 * ca, 2.0 * s3 - 2.0 * s2 * ca],
            [2.0 * s1 - 2.0 * s3 * cb, 0.0, 2.0 * s3 - 2.0 * s1 * cb],
            [2.0 * s1 - 2.0 * s2 * cg, 2.0 * s2 - 2.0 * s1 * cg, 0.0],
        ])
        try:
            delta = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            break
        s = s - delta
        if np.max(np.abs(delta)) < 1e-14 * max(1.0, float(np.max(np.abs(s)))):
            break
    return s


def _polish_pose(pose: Pose, pts3, pix3, calib: StereoCalibration) -> Pose:
    """Newton steps on the exactly-determined 3-point left-image system.

    Quartic roots can nearly coalesce, which limits the distance-triple
    accuracy; this drives the pose itself to machine precision within its
    solution basin.
    """
    for _ in range(5):
        pc = pts3 @ pose.rotation.T + pose.translation
        if np.any(pc[:, 2] <= MIN_DEPTH):
            break
        iz = calib.focal / pc[:, 2]
        proj = np.column_stack([iz * pc[:, 0] + calib.u0,
                                iz * pc[:, 1] + calib.v0])
        r = (pix3 - proj).reshape(6)
        J = np.zeros((6, 6))
        for i in range(3):
            D = np.array([[iz[i], 0.0, -iz[i] * pc[i, 0] / pc[i, 2]],
                          [0.0, iz[i], -iz[i] * pc[i, 1] / pc[i, 2]]])
            J[2 * i:2 * i + 2, :3] = -D
            J[2 * i:2 * i + 2, 3:] = D @ skew(pc[i])
        try:
            delta = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            break
        pose = se3_exp(delta).compose(pose)
        if float(np.max(np.abs(delta))) < 1e-12:
            break
    return pose


def _dedupe_poses(candidates: list[tuple[float, Pose]]) -> list[Pose]:
    """Drop later candidates that repeat an earlier (better-ranked) pose."""
    kept: list[tuple[float, Pose]] = []
    for err, pose in candidates:
        duplicate = False
        for _, other in kept:
            if (rotation_angle(other.rotation.T @ pose.rotation) < 1e-7
                    and np.linalg.norm(other.translation - pose.translation)
                    < 1e-7 * (1.0 + np.linalg.norm(other.translation))):
                duplicate = True
                break
        if not duplicate:
            kept.append((err, pose))
    return [pose for _, pose in kept]


def pnp_minimal(points, pixels, calib: StereoCalibration) -> list[Pose]:
    """Camera pose candidates from 4 points and their left-image pixels.

    Solves perspective-3-point on the first three correspondences (quartic in
    a distance ratio, up to four physically valid solutions) and uses the
    fourth point only to rank candidates: the returned list is sorted by the
    fourth point's left-image reprojection error, best first, with duplicate
    solutions merged. Candidates that place the fourth point behind the
    camera are dropped; the list may be empty.

    Raises DegenerateSample when any three of the four points are (nearly)
    collinear, measured by normalized triangle area <= 1e-8.
    """
    pts = np.asarray(points)
    if pts.dtype == object or pts.ndim == 1:
        pts = np.stack([p.as_array() if isinstance(p, Point3) else np.asarray(p, float)
                        for p in points])
    pts = pts.astype(float)
    if pts.shape != (4, 3):
        raise ValueError("points must contain exactly 4 entries of 3 coordinates")
    pix = np.asarray(pixels, dtype=float).reshape(4, 2)

    for i, j, k in combinations(range(4), 3):
        if _normalized_area(pts[i], pts[j], pts[k]) <= _AREA_TOL:
            raise DegenerateSample(f"points {i},{j},{k} are nearly collinear")

    rays = np.column_stack([(pix[:, 0] - calib.u0) / calib.focal,
                            (pix[:, 1] - calib.v0) / calib.focal,
                            np.ones(4)])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)

    p1, p2, p3 = pts[0], pts[1], pts[2]
    a2 = float((p2 - p3) @ (p2 - p3))
    b2 = float((p1 - p3) @ (p1 - p3))
    c2 = float((p1 - p2) @ (p1 - p2))
    ca = float(rays[1] @ rays[2])
    cb = float(rays[0] @ rays[2])
    cg = float(rays[0] @ rays[1])

    poly, G, H = _grunert_quartic(a2, b2, c2, ca, cb, cg)
    if np.max(np.abs(poly)) == 0.0:
        raise DegenerateSample("quartic vanished identically")
    roots = np.roots(poly)
    dpoly = np.polyder(poly)

    candidates: list[tuple[float, Pose]] = []
    for root in roots:
        if abs(root.imag) > 1e-8 * (1.0 + abs(root.real)):
            continue
        v = float(root.real)
        # polish the root, then recover the distance triple
        for _ in range(2):
            dv = np.polyval(dpoly, v)
            if dv == 0.0:
                break
            v -= np.polyval(poly, v) / dv
        if v <= 0.0:
            continue
        Hv = float(np.polyval(H, v))
        if abs(Hv) < 1e-12:
            continue
        u = float(np.polyval(G, v)) / Hv
        if u <= 0.0:
            continue
        den = 1.0 + u * u - 2.0 * u * cg
        if den <= 0.0:
            continue
        s1 = np.sqrt(c2 / den)
        s = _polish_distances(np.array([s1, u * s1, v * s1]), a2, b2, c2, ca, cb, cg)
        if np.any(s <= 0.0) or not np.all(np.isfinite(s)):
            continue
        cam_pts = s[:, None] * rays[:3]
        R, t = _absolute_orientation(pts[:3], cam_pts)
        pose = _polish_pose(Pose(R, t), pts[:3], pix[:3], calib)
        p4 = pose.apply(pts[3])
        if p4[2] <= MIN_DEPTH:
            continue
        proj4 = np.array([calib.focal * p4[0] / p4[2] + calib.u0,
                          calib.focal * p4[1] / p4[2] + calib.v0])
        err4 = float(np.linalg.norm(proj4 - pix[3]))
        candidates.append((err4, pose))

    candidates.sort(key=lambda item: item[0])
    return _dedupe_poses(candidates)
