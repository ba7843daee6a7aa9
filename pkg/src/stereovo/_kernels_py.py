"""Pure-numpy implementations of the per-hypothesis scoring kernels.

These are the reference semantics for the optional compiled backend in
``_kernels.pyx``; both must keep formulas and branch conditions identical.
Points behind the camera (depth <= min_depth) get +inf squared norm so that
every consensus rule treats them as outliers.
"""
from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def reprojection_sqnorms(rotation, translation, points, measured,
                         focal, baseline, u0, v0, min_depth=1e-9):
    """Squared stereo reprojection error per point, +inf when behind camera.

    measured rows are current-frame (ul, ur, v) observations; points are
    previous-frame 3-D coordinates moved by (rotation, translation).
    """
    p = points @ rotation.T + translation
    z = p[:, 2]
    out = np.full(points.shape[0], np.inf)
    ok = z > min_depth
    iz = focal / z[ok]
    du = measured[ok, 0] - (iz * p[ok, 0] + u0)
    dur = measured[ok, 1] - (iz * (p[ok, 0] - baseline) + u0)
    dv = measured[ok, 2] - (iz * p[ok, 1] + v0)
    out[ok] = du * du + dur * dur + dv * dv
    return out


def msac_total(sqnorms, threshold_sq, weights=None):
    """Sum of min(sqnorm, T^2), optionally weighted."""
    clipped = np.minimum(sqnorms, threshold_sq)
    if weights is None:
        return float(np.sum(clipped))
    return float(np.sum(weights * clipped))


def ransac_outlier_total(sqnorms, threshold_sq, weights=None):
    """Count (or weighted mass) of points with sqnorm >= T^2."""
    out = sqnorms >= threshold_sq
    if weights is None:
        return float(np.count_nonzero(out))
    return float(np.sum(weights[out]))
