"""Point cloud container, k-d tree index and the basic filters."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .geometry import Pose

# LIDARODOM_MAX_WORKERS lifts the clamp (e.g. to exercise real threading on a small machine)
_CPUS = int(os.environ.get("LIDARODOM_MAX_WORKERS", "0")) or (
    len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
)


def effective_workers(workers: int) -> int:
    """Worker count clamped to the CPUs this process may use (results do not depend on it)."""
    return max(1, min(int(workers), _CPUS))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Timestamped points in one frame.

    ``time_offsets`` are seconds after ``stamp`` at which each point was
    captured (all zeros when per-point timing is unknown). Empty clouds
    are legal everywhere.
    """

    stamp: float
    frame: str
    points: np.ndarray
    time_offsets: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size and pts.shape[-1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        pts = pts.reshape(-1, 3)
        if self.time_offsets is None:
            offs = np.zeros(len(pts))
        else:
            offs = np.asarray(self.time_offsets, dtype=np.float64).reshape(-1)
        if len(offs) != len(pts):
            raise ValueError(f"{len(pts)} points but {len(offs)} time offsets")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "time_offsets", offs)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_timing(self) -> bool:
        return bool(len(self.time_offsets)) and bool(np.any(self.time_offsets != 0))

    @classmethod
    def empty(cls, stamp: float = 0.0, frame: str = "robot") -> PointCloud:
        return cls(stamp, frame, np.empty((0, 3)), np.empty(0))

    def select(self, mask_or_idx) -> PointCloud:
        return replace(self, points=self.points[mask_or_idx], time_offsets=self.time_offsets[mask_or_idx])

    def with_points(self, points, time_offsets=None, **kw) -> PointCloud:
        offs = self.time_offsets if time_offsets is None else time_offsets
        return replace(self, points=points, time_offsets=offs, **kw)


def transform_cloud(c: PointCloud, p: Pose, frame: str | None = None) -> PointCloud:
    pts = p.apply(c.points) if len(c) else c.points.copy()
    return replace(c, points=pts, frame=frame if frame is not None else c.frame)


def voxel_keys(points: np.ndarray, leaf: float) -> np.ndarray:
    """Integer voxel coordinates (N, 3) for a given cell size."""
    return np.floor(points / leaf).astype(np.int64)


def pack_keys(keys: np.ndarray) -> np.ndarray | None:
    """Pack (N, 3) integer keys into int64 preserving lexicographic order.

    Returns None when the key span does not fit in 21 bits per axis.
    """
    if len(keys) == 0:
        return np.empty(0, dtype=np.int64)
    lo = keys.min(axis=0)
    span = keys.max(axis=0) - lo
    if np.any(span >= (1 << 21)):
        return None
    k = keys - lo
    return (k[:, 0] << 42) | (k[:, 1] << 21) | k[:, 2]


def voxel_grid_filter(c: PointCloud, leaf: float) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid.

    Output is ordered by voxel key (lexicographic), which makes it
    independent of the input point order. Time offsets are averaged too.
    """
    if not leaf > 0:
        raise ValueError(f"voxel leaf must be positive, got {leaf}")
    if len(c) == 0:
        return c.select(slice(0, 0))
    keys = voxel_keys(c.points, leaf)
    packed = pack_keys(keys)
    if packed is not None:
        _, inverse, counts = np.unique(packed, return_inverse=True, return_counts=True)
    else:
        _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    nvox = len(counts)
    sums = np.zeros((nvox, 3))
    np.add.at(sums, inverse, c.points)
    cent = sums / counts[:, None]
    toff = np.bincount(inverse, weights=c.time_offsets, minlength=nvox) / counts
    return replace(c, points=cent, time_offsets=toff)


def random_downsample(c: PointCloud, keep_fraction: float, seed: int = 0) -> PointCloud:
    """Keep ``round(keep_fraction * n)`` points, chosen uniformly, input order preserved."""
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    n = len(c)
    m = int(np.floor(keep_fraction * n + 0.5))
    if m >= n:
        return c.select(slice(None))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=m, replace=False))
    return c.select(idx)


def range_filter(c: PointCloud, min_r: float, max_r: float) -> PointCloud:
    if not (0 <= min_r < max_r):
        raise ValueError(f"need 0 <= min_r < max_r, got {min_r}, {max_r}")
    if len(c) == 0:
        return c.select(slice(0, 0))
    finite = np.all(np.isfinite(c.points), axis=1)
    r = np.linalg.norm(np.where(finite[:, None], c.points, 0.0), axis=1)
    return c.select(finite & (r >= min_r) & (r <= max_r))


def merge(clouds: Sequence[PointCloud], extrinsics: Sequence[Pose], frame: str = "robot") -> PointCloud:
    """Move each cloud into the robot frame by its extrinsic and concatenate."""
    if len(clouds) != len(extrinsics):
        raise ValueError(f"{len(clouds)} clouds but {len(extrinsics)} extrinsics")
    if not clouds:
        raise ValueError("nothing to merge")
    pts = [ext.apply(c.points) if len(c) else np.empty((0, 3)) for c, ext in zip(clouds, extrinsics)]
    offs = [c.time_offsets for c in clouds]
    meta = {}
    for c in clouds:
        meta.update(c.meta)
    return PointCloud(clouds[0].stamp, frame, np.concatenate(pts), np.concatenate(offs), meta)


class SpatialIndex:
    """Exact k-nearest-neighbour index (scipy cKDTree) with lowest-index tie-breaking.

    With the numba backend, single-neighbour queries first go through a
    dense cell grid (built lazily, searched ring by ring around each query);
    rows it cannot settle exactly are tested against a coarse occupancy grid
    at the distance cutoff, and only the remainder falls back to the tree.
    """

    GRID_MIN_QUERIES = 256
    GRID_CELL_SCALE = 2.5

    def __init__(self, points: np.ndarray) -> None:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise ValueError("cannot index an empty cloud")
        self.points = points
        self.tree = cKDTree(points, balanced_tree=False, compact_nodes=False)
        self._grid = None
        self._occupancy: dict[float, tuple] = {}

    def _cell_size(self) -> float:
        """A few times the typical point spacing, from a fixed stride sample."""
        n = len(self.points)
        sample = self.points[:: max(1, n // 256)]
        d, _ = self.tree.query(sample, k=2)
        spacing = float(np.median(d[:, 1]))
        if not spacing > 0:
            ext = np.ptp(self.points, axis=0).max()
            spacing = max(ext / max(n, 1) ** (1 / 3), 1e-6)
        return self.GRID_CELL_SCALE * spacing

    def _max_cells(self) -> int:
        return max(1 << 20, 16 * len(self.points))

    def grid(self):
        if self._grid is None:
            self._grid = kernels.grid_build(self.points, self._cell_size(), self._max_cells())
        return self._grid

    def occupancy(self, radius: float):
        """Coarse occupancy at cell edge >= radius, cached per radius."""
        occ = self._occupancy.get(radius)
        if occ is None:
            occ = self._occupancy[radius] = kernels.grid_occupancy(self.points, radius, self._max_cells())
        return occ

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, query, k: int = 1, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """k nearest neighbours of each query row -> (indices, distances), shape (Q, k)."""
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query, dtype=np.float64)
        single = q.ndim == 1
        q = q.reshape(-1, 3)
        n = len(self.points)
        k_eff = min(k, n)
        # pull a margin of extra candidates so ties at rank k can be resolved by index
        kq = min(n, k_eff + 2)
        dist, idx = self.tree.query(q, k=kq, workers=effective_workers(workers))
        dist = dist.reshape(len(q), kq)
        idx = idx.reshape(len(q), kq)
        order = np.lexsort((idx, dist), axis=-1)
        dist = np.take_along_axis(dist, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
        if kq < n:
            # a tie running past the candidate margin: fall back to a ball query for that row
            open_tie = dist[:, kq - 1] == dist[:, k_eff - 1]
            for r in np.nonzero(open_tie)[0]:
                cand = np.array(self.tree.query_ball_point(q[r], dist[r, k_eff - 1] * (1 + 1e-12) + 1e-300))
                cd = np.linalg.norm(self.points[cand] - q[r], axis=1)
                o = np.lexsort((cand, cd))[:k_eff]
                idx[r, :k_eff] = cand[o]
                dist[r, :k_eff] = cd[o]
        idx = idx[:, :k_eff]
        dist = dist[:, :k_eff]
        if single:
            return idx[0], dist[0]
        return idx, dist

    def nearest_one(self, query: np.ndarray, max_dist: float = np.inf, workers: int = 1):
        """Single nearest neighbour per query row; index -1 where none lies within max_dist.

        Ties are broken towards the lower index.
        """
        q = np.asarray(query, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if n == 1:
            d = np.linalg.norm(q - self.points[0], axis=1)
            idx = np.zeros(len(q), dtype=np.int64)
            far = d > max_dist
            idx[far] = -1
            d[far] = np.inf
            return idx, d
        impl = kernels.active()
        if impl.grid_nearest is not None and len(q) >= self.GRID_MIN_QUERIES:
            best, d, need = impl.grid_nearest(self.grid(), q, max_dist, workers)
            rest = np.nonzero(need)[0]
            if len(rest) and np.isfinite(max_dist):
                # rows far from every point: settled by a coarse emptiness test
                empty = impl.block_empty(self.occupancy(float(max_dist)), q[rest], workers)
                best[rest[empty]] = -1
                d[rest[empty]] = np.inf
                rest = rest[~empty]
            if len(rest):
                best[rest], d[rest] = self._tree_nearest_one(q[rest], max_dist, workers)
            return best, d
        return self._tree_nearest_one(q, max_dist, workers)

    def _tree_nearest_one(self, q: np.ndarray, max_dist: float, workers: int):
        dist, idx = self.tree.query(q, k=2, distance_upper_bound=max_dist, workers=effective_workers(workers))
        # re-rank the two candidates on squared distance, the quantity the grid path compares
        n = len(self.points)
        pts = self.points[np.minimum(idx, n - 1)]
        d2 = np.einsum("qkj,qkj->qk", pts - q[:, None, :], pts - q[:, None, :])
        d2[idx >= n] = np.inf
        second = (d2[:, 1] < d2[:, 0]) | ((d2[:, 1] == d2[:, 0]) & (idx[:, 1] < idx[:, 0]))
        best = np.where(second, idx[:, 1], idx[:, 0])
        d = np.sqrt(np.where(second, d2[:, 1], d2[:, 0]))
        # a (near) tie at the second rank may hide further equidistant points: settle it by ball query
        for r in np.nonzero(np.isfinite(dist[:, 1]) & (dist[:, 1] <= dist[:, 0] * (1 + 1e-12)))[0]:
            cand = np.asarray(self.tree.query_ball_point(q[r], dist[r, 1] * (1 + 1e-12)), dtype=np.int64)
            cd2 = np.sum((self.points[cand] - q[r]) ** 2, axis=1)
            o = np.lexsort((cand, cd2))[0]
            best[r], d[r] = cand[o], np.sqrt(cd2[o])
        best = np.where(np.isfinite(d) & (d <= max_dist), best, -1).astype(np.int64)
        return best, np.where(best >= 0, d, np.inf)

    def ball(self, center, radius: float) -> np.ndarray:
        return np.sort(np.asarray(self.tree.query_ball_point(np.asarray(center, dtype=float), radius), dtype=np.int64))


def build_index(c: PointCloud) -> SpatialIndex:
    return SpatialIndex(c.points)


def nearest(idx: SpatialIndex, query, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
    return idx.nearest(query, k)
