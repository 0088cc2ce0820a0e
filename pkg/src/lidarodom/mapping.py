"""Global map store (voxel-hashed at fine resolution) and local submap extraction."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .geometry import Pose
from .pointcloud import PointCloud, SpatialIndex, voxel_keys
from .registration import EnrichedCloud


@dataclass(frozen=True)
class KeyframePolicy:
    translation_threshold: float = 1.0  # meters
    rotation_threshold: float = 30.0  # degrees

    def __post_init__(self):
        if not (self.translation_threshold > 0 and self.rotation_threshold > 0):
            raise ValueError("keyframe thresholds must be strictly positive")


def should_insert(pose: Pose, policy: KeyframePolicy, last_keyframe: Pose | None) -> bool:
    """True on the first scan, or once translation OR rotation since the last keyframe reaches its threshold."""
    if last_keyframe is None:
        return True
    rel = last_keyframe.inverse() @ pose
    moved = float(np.linalg.norm(pose.translation - last_keyframe.translation))
    turned = math.degrees(rel.rotation.angle())
    # thresholds are inclusive; a relative 1e-12 slack absorbs round-off at exact boundaries
    slack = 1.0 - 1e-12
    return moved >= policy.translation_threshold * slack or turned >= policy.rotation_threshold * slack


class MapStore:
    """Points accumulated in the world frame, at most one per ``resolution`` cell.

    The first point to land in a cell is kept along with its covariance,
    so submaps come back already enriched. Writers and readers are
    serialized by a lock; readers get copies (consistent snapshots).
    """

    def __init__(self, resolution: float = 0.001) -> None:
        if not resolution > 0:
            raise ValueError("map resolution must be positive")
        self.resolution = resolution
        self.last_keyframe: Pose | None = None
        self.insertions = 0
        self.version = 0
        self._points = np.empty((0, 3))
        self._covs = np.empty((0, 3, 3))
        self._keys: set[tuple[int, int, int]] = set()
        self._index: SpatialIndex | None = None
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self) -> np.ndarray:
        with self._lock:
            return self._points.copy()

    def insert(self, cloud: PointCloud | EnrichedCloud, covariances: np.ndarray | None = None) -> int:
        """Add world-frame points, skipping occupied cells. Returns the number added."""
        if isinstance(cloud, EnrichedCloud):
            covariances = cloud.covariances if covariances is None else covariances
            cloud = cloud.cloud
        pts = cloud.points
        if covariances is None:
            covariances = np.broadcast_to(np.eye(3), (len(pts), 3, 3))
        if len(pts) == 0:
            with self._lock:
                self.insertions += 1
            return 0
        keys = voxel_keys(pts, self.resolution)
        # first occurrence of each cell within this batch
        _, first = np.unique(keys, axis=0, return_index=True)
        first.sort()
        with self._lock:
            fresh = []
            for i in first:
                k = (int(keys[i, 0]), int(keys[i, 1]), int(keys[i, 2]))
                if k not in self._keys:
                    self._keys.add(k)
                    fresh.append(i)
            fresh = np.asarray(fresh, dtype=np.int64)
            if len(fresh):
                self._points = np.concatenate([self._points, pts[fresh]])
                self._covs = np.concatenate([self._covs, np.asarray(covariances)[fresh]])
                self._index = None
                self.version += 1
            self.insertions += 1
        return len(fresh)

    def extract_submap(self, pose: Pose, radius: float) -> EnrichedCloud:
        """Every stored point within ``radius`` of the pose translation (read-only)."""
        if not radius > 0:
            raise ValueError("submap radius must be positive")
        with self._lock:
            if len(self._points) == 0:
                return EnrichedCloud(PointCloud.empty(frame="world"), np.empty((0, 3, 3)))
            if self._index is None:
                self._index = SpatialIndex(self._points)
            sel = self._index.ball(pose.translation, radius)
            pts = self._points[sel]
            covs = self._covs[sel]
        return EnrichedCloud(PointCloud(0.0, "world", pts), covs)

    def export(self, stamp: float = 0.0) -> PointCloud:
        with self._lock:
            return PointCloud(stamp, "world", self._points.copy())


def insert(map_: MapStore, cloud: PointCloud | EnrichedCloud) -> MapStore:
    map_.insert(cloud)
    return map_


def extract_submap(map_: MapStore, pose: Pose, radius: float) -> EnrichedCloud:
    return map_.extract_submap(pose, radius)
