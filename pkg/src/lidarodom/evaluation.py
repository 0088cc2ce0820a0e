"""Trajectory and map accuracy metrics plus per-scan timing statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import Pose, Rotation, StampedPose
from .pointcloud import PointCloud, SpatialIndex
from .registration import GicpConfig, gicp_align, identity_covariances

REALTIME_BUDGET = 0.1


class Trajectory:
    """Time-ordered poses with strictly increasing stamps (stored as arrays)."""

    def __init__(self, stamps, positions, quats_wxyz=None) -> None:
        stamps = np.asarray(stamps, dtype=float).reshape(-1)
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        if len(stamps) != len(positions):
            raise ValueError("stamps and positions differ in length")
        if len(stamps) > 1 and not np.all(np.diff(stamps) > 0):
            raise ValueError("trajectory stamps must be strictly increasing")
        if quats_wxyz is None:
            quats_wxyz = np.tile([1.0, 0.0, 0.0, 0.0], (len(stamps), 1))
        self.stamps = stamps
        self.positions = positions
        self.quats = np.asarray(quats_wxyz, dtype=float).reshape(-1, 4)

    @classmethod
    def from_poses(cls, poses: Iterable[StampedPose]) -> Trajectory:
        poses = list(poses)
        return cls(
            [p.time for p in poses],
            [p.pose.translation for p in poses],
            [p.pose.rotation.wxyz for p in poses],
        )

    def __len__(self) -> int:
        return len(self.stamps)

    def pose(self, i: int) -> Pose:
        return Pose(Rotation(self.quats[i]), self.positions[i])

    def poses(self) -> list[StampedPose]:
        return [StampedPose(float(t), self.pose(i)) for i, t in enumerate(self.stamps)]

    def transformed(self, pose: Pose) -> Trajectory:
        """Every pose premultiplied by ``pose``."""
        q = [(pose.rotation * Rotation(w)).wxyz for w in self.quats]
        return Trajectory(self.stamps, pose.apply(self.positions), q)


@dataclass(frozen=True)
class ApeReport:
    max: float
    mean: float
    std: float
    rmse: float
    count: int
    alignment: Pose = field(default_factory=Pose.identity)
    errors: np.ndarray = field(default=None, repr=False, compare=False)
    stamps: np.ndarray = field(default=None, repr=False, compare=False)


def associate(a: np.ndarray, b: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (i, j) matching each stamp in ``a`` to the nearest in ``b`` within tol.

    Each ``b`` stamp is used at most once (first come in ``a`` order);
    ties go to the earlier ``b`` stamp.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    pos = np.searchsorted(b, a)
    lo = np.clip(pos - 1, 0, len(b) - 1)
    hi = np.clip(pos, 0, len(b) - 1)
    pick = np.where(np.abs(b[hi] - a) < np.abs(b[lo] - a), hi, lo)
    ok = np.abs(b[pick] - a) <= tol
    ia = np.nonzero(ok)[0]
    jb = pick[ok]
    _, first = np.unique(jb, return_index=True)
    first.sort()
    return ia[first], jb[first]


def rigid_fit(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares R, t with dst ~ R src + t (Kabsch/Umeyama without scale)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    r = u @ s @ vt
    return Pose(Rotation.from_matrix(r), mu_d - r @ mu_s)


def ape(
    est: Trajectory,
    gt: Trajectory,
    assoc_tol: float = 0.05,
    alignment: str = "se3",
) -> ApeReport:
    """Absolute position error after stamp association and optional rigid alignment."""
    if alignment not in ("se3", "none"):
        raise ValueError(f"alignment must be 'se3' or 'none', got {alignment!r}")
    ie, ig = associate(est.stamps, gt.stamps, assoc_tol)
    if len(ie) == 0:
        raise ValueError(f"no stamp pairs within {assoc_tol} s")
    pe = est.positions[ie]
    pg = gt.positions[ig]
    align = rigid_fit(pe, pg) if alignment == "se3" and len(ie) >= 3 else Pose.identity()
    if alignment == "se3" and len(ie) < 3:
        # too few points to fix rotation: translation only
        align = Pose(Rotation.identity(), (pg - pe).mean(axis=0))
    err = np.linalg.norm(align.apply(pe) - pg, axis=1)
    return ApeReport(
        max=float(err.max()),
        mean=float(err.mean()),
        std=float(err.std()),
        rmse=float(math.sqrt(np.mean(err**2))),
        count=len(err),
        alignment=align,
        errors=err,
        stamps=est.stamps[ie],
    )


@dataclass(frozen=True)
class MapErrorReport:
    rmse: float
    converged: bool
    alignment: Pose
    iterations: int


def map_error(
    est_map: PointCloud,
    gt_map: PointCloud,
    max_dist: float = 1.0,
    iterations: int = 50,
    workers: int = 1,
) -> MapErrorReport:
    """RMSE of nearest-neighbour distances est -> gt after point-to-point ICP pre-alignment."""
    if len(est_map) == 0 or len(gt_map) == 0:
        raise ValueError("map_error needs two non-empty clouds")
    cfg = GicpConfig(
        scan_to_scan_iterations=iterations,
        correspondence_max_dist=max_dist,
        workers=workers,
        translation_epsilon=1e-6,
        rotation_epsilon=1e-6,
    )
    src = identity_covariances(est_map)
    tgt = identity_covariances(gt_map)
    res = gicp_align(src, tgt, Pose.identity(), cfg, iterations)
    idx = tgt.index
    moved = res.transform.apply(est_map.points)
    d, _ = idx.tree.query(moved, k=1, workers=workers)
    rmse = float(math.sqrt(np.mean(np.asarray(d) ** 2)))
    return MapErrorReport(rmse, res.converged, res.transform, res.iterations_used)


@dataclass(frozen=True)
class TimingReport:
    count: int
    mean: float | None = None
    median: float | None = None
    max: float | None = None
    realtime_fraction: float | None = None
    histogram: tuple = ()
    bin_edges: tuple = ()
    drops_per_second: float = 0.0


def timing_report(
    durations: Sequence[float],
    dropped: int = 0,
    scan_period: float = 0.1,
    bins: int = 20,
) -> TimingReport:
    """Summary of per-scan processing times; drops/s is over the stream duration."""
    d = np.asarray(list(durations), dtype=float)
    if len(d) == 0:
        return TimingReport(0)
    hist, edges = np.histogram(d, bins=bins)
    span = (len(d) + dropped) * scan_period
    return TimingReport(
        count=len(d),
        mean=float(d.mean()),
        median=float(np.median(d)),
        max=float(d.max()),
        realtime_fraction=float(np.mean(d < REALTIME_BUDGET)),
        histogram=tuple(int(h) for h in hist),
        bin_edges=tuple(float(e) for e in edges),
        drops_per_second=dropped / span if span > 0 else 0.0,
    )


def simulate_drops(durations: Sequence[float], scan_period: float = 0.1) -> tuple[int, int]:
    """(processed, dropped) for scans arriving every ``scan_period`` with no buffering."""
    from .pipeline import DropAccounting

    acc = DropAccounting()
    it = iter(durations)
    k = 0
    pending = next(it, None)
    while pending is not None:
        t = k * scan_period
        if acc.offer(t):
            acc.finish(t, pending)
            pending = next(it, None)
        k += 1
    return acc.processed, acc.dropped
