"""Compare the numba and numpy kernel backends on one synthetic scan.

Usage: python3 benchmarks/bench_kernels.py [--points N] [--repeat R] [--workers W]

Both backends are imported in the same process (the environment switch
only picks the default), so the timings and the max relative difference of
every kernel output are reported side by side.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from lidarodom import kernels
from lidarodom.geometry import Pose, Rotation
from lidarodom.pointcloud import SpatialIndex


def _best(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def make_inputs(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    # points on three noisy planes so the covariances are planar
    k = n // 3
    a = np.column_stack([rng.uniform(-10, 10, k), rng.uniform(-10, 10, k), rng.normal(0, 0.01, k)])
    b = np.column_stack([rng.uniform(-10, 10, k), rng.normal(4, 0.01, k), rng.uniform(-1, 3, k)])
    c = np.column_stack([rng.normal(8, 0.01, n - 2 * k), rng.uniform(-10, 10, n - 2 * k), rng.uniform(-1, 3, n - 2 * k)])
    pts = np.vstack([a, b, c])
    _, nbr = SpatialIndex(pts).tree.query(pts, k=10)
    pose = Pose(Rotation.from_rpy(0.01, -0.02, 0.05), np.array([0.2, -0.1, 0.05]))
    times = rng.uniform(0.0, 0.1, n)
    st = np.linspace(-0.02, 0.12, 8)
    sq = np.array([Rotation.from_rpy(0, 0, 0.3 * t).wxyz for t in st])
    sp = np.column_stack([st, 0.1 * st, np.zeros_like(st)])
    return pts, nbr.astype(np.int64), pose, times, (st, sq, sp)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=10000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)

    if kernels.numba_impl is None:
        print("numba is not importable; nothing to compare")
        return 1
    pts, nbr, pose, times, (st, sq, sp) = make_inputs(args.points)
    rot, trans = pose.rotation.as_matrix(), pose.translation
    ref_q, ref_p = sq[-1], sp[-1]
    w = args.workers

    cases = {
        "neighbor_covariances": lambda impl: impl.neighbor_covariances(pts, nbr, 1e-3, w),
        "gicp_terms": lambda impl: impl.gicp_terms(pts, covs, rot, trans, pts, covs, w),
        "gicp_costs": lambda impl: impl.gicp_costs(pts, covs, rot, trans, pts, covs, w),
        "deskew": lambda impl: impl.deskew(pts, times, st, sq, sp, ref_q, ref_p, 0.02, w)[0],
    }
    covs = kernels.numpy_impl.neighbor_covariances(pts, nbr, 1e-3, w)
    for fn in cases.values():  # compile before timing
        fn(kernels.numba_impl)

    print(f"points={args.points} workers={w} repeat={args.repeat} default backend={kernels.BACKEND}")
    print(f"{'kernel':<22} {'numpy [ms]':>11} {'numba [ms]':>11} {'speedup':>8} {'rel diff':>11}")
    for name, fn in cases.items():
        t_np = _best(lambda: fn(kernels.numpy_impl), args.repeat)
        t_nb = _best(lambda: fn(kernels.numba_impl), args.repeat)
        a, b = np.asarray(fn(kernels.numpy_impl)), np.asarray(fn(kernels.numba_impl))
        diff = float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(a)))))
        print(f"{name:<22} {1e3 * t_np:>11.2f} {1e3 * t_nb:>11.2f} {t_np / t_nb:>7.1f}x {diff:>11.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
