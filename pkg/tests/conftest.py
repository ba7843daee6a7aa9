"""Shared fixtures for the test suite."""
import numpy as np
import pytest

from stereovo import DEFAULT_CALIBRATION, StereoCalibration


@pytest.fixture
def simple_calib() -> StereoCalibration:
    """Round numbers so projections can be checked by hand."""
    return StereoCalibration(focal=100.0, u0=320.0, v0=240.0, baseline=0.5,
                             image_width=640.0, image_height=480.0,
                             disparity_range=64.0)


@pytest.fixture
def kitti_calib() -> StereoCalibration:
    return DEFAULT_CALIBRATION


def random_twist(rng, trans_scale=1.0, rot_scale=1.0) -> np.ndarray:
    """Twist with rotation norm bounded away from the pi branch cut."""
    rho = rng.normal(0.0, trans_scale, 3)
    omega = rng.normal(0.0, 1.0, 3)
    norm = np.linalg.norm(omega)
    if norm > 0.0:
        omega *= rng.uniform(0.0, min(rot_scale, 3.0)) / norm
    return np.concatenate([rho, omega])


def make_correspondences(rng, motion, calib, n, sigma_u=0.0, sigma_v=0.0):
    """Clean two-frame correspondences visible in both frames.

    motion maps previous-frame points into the current frame. Returns
    (correspondences, true_points) with points triangulated from the (noisy)
    previous-frame observations, mirroring what an estimator would see.
    """
    from stereovo import (Correspondence, Pose, StereoMeasurement,
                          stereo_project_many, triangulate)

    pts = np.empty((0, 3))
    while pts.shape[0] < n:
        m = n - pts.shape[0]
        u = rng.uniform(0.1 * calib.image_width, 0.9 * calib.image_width, m)
        v = rng.uniform(0.1 * calib.image_height, 0.9 * calib.image_height, m)
        z = rng.uniform(8.0, 40.0, m)
        cand = np.column_stack([(u - calib.u0) * z / calib.focal,
                                (v - calib.v0) * z / calib.focal, z])
        cur = motion.apply(cand)
        iz = calib.focal / cur[:, 2]
        ul = iz * cur[:, 0] + calib.u0
        vv = iz * cur[:, 1] + calib.v0
        ok = ((cur[:, 2] > 1.0) & (ul > 0) & (ul < calib.image_width)
              & (vv > 0) & (vv < calib.image_height))
        pts = np.vstack([pts, cand[ok]])
    pts = pts[:n]

    obs_prev = stereo_project_many(Pose.identity(), pts, calib)
    obs_cur = stereo_project_many(motion, pts, calib)
    scale = np.array([sigma_u, sigma_u, sigma_v, sigma_u, sigma_u, sigma_v])
    noisy = np.hstack([obs_prev, obs_cur]) + rng.standard_normal((n, 6)) * scale
    out = []
    for row in noisy:
        z6 = StereoMeasurement(*row)
        out.append(Correspondence(z=z6, point=triangulate(z6, calib)))
    return out, pts
