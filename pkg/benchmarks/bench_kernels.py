#!/usr/bin/env python3
"""Benchmark the compiled scoring kernels against the pure-numpy fallback.

Times reprojection_sqnorms and the consensus reductions on synthetic
hypothesis-scoring workloads of increasing size, reports per-call medians
for both backends and the agreement between their results.

Run from the repository root after installing the package:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --sizes 100,1000,10000 --repeats 200

If the extension was not built the script still runs and says so; the
package itself behaves the same way (and honors STEREOVO_PURE=1 to force
the numpy backend even when the extension exists).
"""
import argparse
import time

import numpy as np

from stereovo import se3_exp
from stereovo import _kernels_py

try:
    from stereovo import _kernels
except ImportError:
    _kernels = None


def _workload(rng, n):
    """One plausible scoring call: a hypothesis pose, points, measurements."""
    pose = se3_exp(np.concatenate([rng.normal(0.0, 0.3, 3),
                                   rng.normal(0.0, 0.03, 3)]))
    z = rng.uniform(5.0, 40.0, n)
    points = np.column_stack([z * rng.uniform(-0.4, 0.4, n),
                              z * rng.uniform(-0.2, 0.2, n), z])
    focal, baseline, u0, v0 = 718.856, 0.537, 607.19, 185.22
    p = points @ pose.rotation.T + pose.translation
    measured = np.column_stack([focal * p[:, 0] / p[:, 2] + u0,
                                focal * (p[:, 0] - baseline) / p[:, 2] + u0,
                                focal * p[:, 1] / p[:, 2] + v0])
    measured += rng.standard_normal((n, 3))
    weights = rng.uniform(0.5, 2.0, n)
    args = (pose.rotation, pose.translation, points, measured,
            focal, baseline, u0, v0)
    sqnorms = _kernels_py.reprojection_sqnorms(*args)
    return {
        "reprojection_sqnorms": (args, {}),
        "msac_total": ((sqnorms, 2.79 ** 2), {"weights": weights}),
        "ransac_outlier_total": ((sqnorms, 2.79 ** 2), {"weights": weights}),
    }


def _time_call(fn, args, kwargs, repeats):
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args, **kwargs)
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def _max_rel_dev(a, b):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    finite = np.isfinite(a) & np.isfinite(b)
    if not np.array_equal(np.isfinite(a), np.isfinite(b)):
        return np.inf
    scale = np.maximum(1.0, np.abs(a[finite]))
    return float(np.max(np.abs(a[finite] - b[finite]) / scale, initial=0.0))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="100,1000,10000",
                        help="comma-separated point counts")
    parser.add_argument("--repeats", type=int, default=300,
                        help="timing samples per measurement")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    sizes = [int(s) for s in args.sizes.split(",") if s]
    rng = np.random.default_rng(args.seed)

    if _kernels is None:
        print("compiled extension not built; timing the numpy backend only")
        print(f"{'kernel':24s} {'n':>7s} {'numpy ms':>10s}")
        for n in sizes:
            for name, (call_args, kwargs) in _workload(rng, n).items():
                ms = _time_call(getattr(_kernels_py, name), call_args,
                                kwargs, args.repeats) * 1e3
                print(f"{name:24s} {n:7d} {ms:10.4f}")
        return 0

    print(f"{'kernel':24s} {'n':>7s} {'numpy ms':>10s} {'compiled ms':>12s} "
          f"{'speedup':>8s} {'max rel dev':>12s}")
    for n in sizes:
        for name, (call_args, kwargs) in _workload(rng, n).items():
            py_fn = getattr(_kernels_py, name)
            cy_fn = getattr(_kernels, name)
            dev = _max_rel_dev(py_fn(*call_args, **kwargs),
                               cy_fn(*call_args, **kwargs))
            t_py = _time_call(py_fn, call_args, kwargs, args.repeats)
            t_cy = _time_call(cy_fn, call_args, kwargs, args.repeats)
            print(f"{name:24s} {n:7d} {t_py * 1e3:10.4f} {t_cy * 1e3:12.4f} "
                  f"{t_py / t_cy:8.2f} {dev:12.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
