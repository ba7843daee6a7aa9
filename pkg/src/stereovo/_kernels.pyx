# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled scoring kernels; semantics mirror _kernels_py exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

BACKEND_NAME = "cython"


def reprojection_sqnorms(const double[:, ::1] rotation,
                         const double[::1] translation,
                         const double[:, ::1] points,
                         const double[:, ::1] measured,
                         double focal, double baseline, double u0, double v0,
                         double min_depth=1e-9):
    """Squared stereo reprojection error per point, +inf when behind camera."""
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t i
    cdef double r00 = rotation[0, 0], r01 = rotation[0, 1], r02 = rotation[0, 2]
    cdef double r10 = rotation[1, 0], r11 = rotation[1, 1], r12 = rotation[1, 2]
    cdef double r20 = rotation[2, 0], r21 = rotation[2, 1], r22 = rotation[2, 2]
    cdef double t0 = translation[0], t1 = translation[1], t2 = translation[2]
    cdef double px, py, pz, iz, du, dur, dv
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        px = r00 * points[i, 0] + r01 * points[i, 1] + r02 * points[i, 2] + t0
        py = r10 * points[i, 0] + r11 * points[i, 1] + r12 * points[i, 2] + t1
        pz = r20 * points[i, 0] + r21 * points[i, 1] + r22 * points[i, 2] + t2
        if pz <= min_depth:
            o[i] = INFINITY
            continue
        iz = focal / pz
        du = measured[i, 0] - (iz * px + u0)
        dur = measured[i, 1] - (iz * (px - baseline) + u0)
        dv = measured[i, 2] - (iz * py + v0)
        o[i] = du * du + dur * dur + dv * dv
    return out


def msac_total(const double[::1] sqnorms, double threshold_sq, weights=None):
    """Sum of min(sqnorm, T^2), optionally weighted."""
    cdef Py_ssize_t n = sqnorms.shape[0]
    cdef Py_ssize_t i
    cdef double total = 0.0
    cdef double s
    cdef const double[::1] w
    if weights is None:
        for i in range(n):
            s = sqnorms[i]
            total += s if s < threshold_sq else threshold_sq
    else:
        w = weights
        for i in range(n):
            s = sqnorms[i]
            total += w[i] * (s if s < threshold_sq else threshold_sq)
    return total


def ransac_outlier_total(const double[::1] sqnorms, double threshold_sq,
                         weights=None):
    """Count (or weighted mass) of points with sqnorm >= T^2."""
    cdef Py_ssize_t n = sqnorms.shape[0]
    cdef Py_ssize_t i
    cdef double total = 0.0
    cdef const double[::1] w
    if weights is None:
        for i in range(n):
            if sqnorms[i] >= threshold_sq:
                total += 1.0
    else:
        w = weights
        for i in range(n):
            if sqnorms[i] >= threshold_sq:
                total += w[i]
    return total
