"""Backend dispatch for the scoring kernels.

A compiled Cython extension is preferred when it was built; the pure-numpy
module carries identical semantics and is used otherwise. Setting the
environment variable ``STEREOVO_PURE=1`` forces the numpy backend.
"""
from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("STEREOVO_PURE"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND_NAME

reprojection_sqnorms = _impl.reprojection_sqnorms
msac_total = _impl.msac_total
ransac_outlier_total = _impl.ransac_outlier_total
