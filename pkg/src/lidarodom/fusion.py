"""Sensor integration: per-source pose buffers, rate-based health and the prior transform."""

from __future__ import annotations

import bisect
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import Pose, StampedPose, relative
from .preprocess import MotionSamples


class SourceKind(Enum):
    FULL_ODOMETRY = "odometry"
    ROTATION_ONLY = "imu"

    @classmethod
    def parse(cls, text: str) -> SourceKind:
        t = str(text).strip().lower()
        if t in ("odometry", "odom", "full", "full_odometry", "wio", "vio", "kio"):
            return cls.FULL_ODOMETRY
        if t in ("imu", "rotation", "rotation_only"):
            return cls.ROTATION_ONLY
        raise ValueError(f"unknown source kind {text!r}")


class SourceBuffer:
    """Bounded, time-ordered buffer of robot-frame poses from one source.

    Measurements are mapped into the robot frame on ingest by conjugating
    with the source extrinsic (sensor pose in the robot frame). IMU sources
    keep only their rotation.

    Thread safety: ``ingest`` may run on a feeder thread while the pipeline
    reads; every read works on a snapshot taken under the lock.
    """

    def __init__(
        self,
        id: str,
        kind: SourceKind = SourceKind.FULL_ODOMETRY,
        priority: int = 0,
        extrinsic: Pose | None = None,
        health_window: float = 2.0,
        min_rate: float = 1.0,
        span: float = 15.0,
        late_tolerance: float = 0.01,
    ) -> None:
        if health_window <= 0 or min_rate <= 0:
            raise ValueError("health_window and min_rate must be positive")
        if span < health_window:
            raise ValueError(f"buffer span {span} shorter than health window {health_window}")
        self.id = id
        self.kind = kind
        self.priority = priority
        self.extrinsic = extrinsic
        self.health_window = health_window
        self.min_rate = min_rate
        self.span = span
        self.late_tolerance = late_tolerance
        self.dropped = 0
        self._times: list[float] = []
        self._quats: list[np.ndarray] = []
        self._trans: list[np.ndarray] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._times)

    @property
    def rotation_only(self) -> bool:
        return self.kind is SourceKind.ROTATION_ONLY

    def _to_robot(self, pose: Pose) -> Pose:
        if self.extrinsic is not None:
            pose = self.extrinsic @ pose @ self.extrinsic.inverse()
        if self.rotation_only:
            pose = Pose(pose.rotation, (0.0, 0.0, 0.0))
        return pose

    def ingest(self, m: StampedPose) -> bool:
        """Buffer one measurement; returns False if it was dropped (and counted)."""
        pose = self._to_robot(m.pose)
        t = float(m.time)
        with self._lock:
            if self._times:
                newest = self._times[-1]
                # late by more than the tolerance (or beyond the span): drop
                if t < newest - min(self.late_tolerance, self.span):
                    self.dropped += 1
                    return False
                i = bisect.bisect_left(self._times, t)
                if i < len(self._times) and self._times[i] == t:
                    self.dropped += 1
                    return False
            else:
                i = 0
            self._times.insert(i, t)
            self._quats.insert(i, pose.rotation.wxyz)
            self._trans.insert(i, pose.translation)
            cutoff = self._times[-1] - self.span
            k = bisect.bisect_left(self._times, cutoff)
            if k:
                del self._times[:k], self._quats[:k], self._trans[:k]
        return True

    def snapshot(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        with self._lock:
            times = np.array(self._times, dtype=float)
            quats = np.array(self._quats, dtype=float).reshape(-1, 4)
            trans = np.array(self._trans, dtype=float).reshape(-1, 3)
        return times, quats, trans

    def count_in(self, t0: float, t1: float) -> int:
        with self._lock:
            return bisect.bisect_right(self._times, t1) - bisect.bisect_left(self._times, t0)

    def is_healthy(self, now: float) -> bool:
        """More than ``min_rate`` messages per second over the trailing health window."""
        n = self.count_in(now - self.health_window, now)
        return n > self.min_rate * self.health_window

    def motion(self, t0: float, t1: float, hold_tolerance: float = 0.02) -> Optional[MotionSamples]:
        """Samples covering [t0, t1] (plus one neighbour each side) for interpolation."""
        times, quats, trans = self.snapshot()
        if len(times) == 0:
            return None
        lo = max(0, int(np.searchsorted(times, t0, side="right")) - 1)
        hi = min(len(times), int(np.searchsorted(times, t1, side="left")) + 1)
        if hi <= lo:
            return None
        return MotionSamples(times[lo:hi], quats[lo:hi], trans[lo:hi], hold_tolerance)

    def __repr__(self) -> str:
        return f"SourceBuffer({self.id!r}, {self.kind.value}, priority={self.priority}, n={len(self)})"


def ingest(src: SourceBuffer, m: StampedPose) -> SourceBuffer:
    src.ingest(m)
    return src


def is_healthy(src: SourceBuffer, now: float) -> bool:
    return src.is_healthy(now)


def select_source(sources: Iterable[SourceBuffer], now: float) -> Optional[str]:
    """Id of the healthy source with the lowest priority number, or None."""
    srcs = sorted(sources, key=lambda s: s.priority)
    prios = [s.priority for s in srcs]
    if len(set(prios)) != len(prios):
        raise ValueError(f"source priorities must be unique, got {prios}")
    for s in srcs:
        if s.is_healthy(now):
            return s.id
    return None


@dataclass(frozen=True)
class PriorResult:
    transform: Pose
    source_id: Optional[str]
    degraded_to_identity: bool

    @classmethod
    def identity(cls) -> PriorResult:
        return cls(Pose.identity(), None, True)


class SensorIntegrator:
    """Static priority queue over health-monitored sources."""

    def __init__(self, sources: Sequence[SourceBuffer] = (), bracket_tolerance: float = 0.02) -> None:
        self.sources: dict[str, SourceBuffer] = {}
        self.bracket_tolerance = bracket_tolerance
        for s in sources:
            self.add(s)

    def add(self, src: SourceBuffer) -> None:
        if src.id in self.sources:
            raise ValueError(f"duplicate source id {src.id!r}")
        if any(s.priority == src.priority for s in self.sources.values()):
            raise ValueError(f"duplicate priority {src.priority} for {src.id!r}")
        self.sources[src.id] = src

    def ingest(self, source_id: str, m: StampedPose) -> bool:
        return self.sources[source_id].ingest(m)

    def by_priority(self) -> list[SourceBuffer]:
        return sorted(self.sources.values(), key=lambda s: s.priority)

    def select(self, now: float) -> Optional[str]:
        return select_source(self.sources.values(), now)

    def healthy(self, now: float) -> list[SourceBuffer]:
        return [s for s in self.by_priority() if s.is_healthy(now)]

    def compute_prior(self, t_prev: float, t_curr: float, now: float | None = None) -> PriorResult:
        return compute_prior(self.by_priority(), t_prev, t_curr, now, self.bracket_tolerance)

    def motion_provider(self, now: float | None = None):
        """A de-skew provider backed by the best healthy source that covers the request."""

        def provider(t0: float, t1: float) -> Optional[MotionSamples]:
            at = t1 if now is None else now
            for src in self.healthy(at):
                ms = src.motion(t0, t1, self.bracket_tolerance)
                if ms is not None and ms.pose_at(t0) is not None and ms.pose_at(t1) is not None:
                    return ms
            return None

        return provider


def compute_prior(
    sources: Sequence[SourceBuffer],
    t_prev: float,
    t_curr: float,
    now: float | None = None,
    bracket_tolerance: float = 0.02,
) -> PriorResult:
    """E = relative(Y(t_prev), Y(t_curr)) from the best healthy source.

    Healthy sources are tried in priority order; the first whose buffer
    brackets both stamps wins. Nothing is extrapolated: past the newest
    sample only ``bracket_tolerance`` of hold is allowed. With no usable
    source the result is identity, flagged degraded.
    """
    if not t_prev < t_curr:
        raise ValueError(f"need t_prev < t_curr, got {t_prev}, {t_curr}")
    now = t_curr if now is None else now
    for src in sorted(sources, key=lambda s: s.priority):
        if not src.is_healthy(now):
            continue
        ms = src.motion(t_prev, t_curr, bracket_tolerance)
        if ms is None:
            continue
        y0 = ms.pose_at(t_prev)
        y1 = ms.pose_at(t_curr)
        if y0 is None or y1 is None:
            continue
        e = relative(y0, y1)
        if src.rotation_only:
            e = Pose(e.rotation, (0.0, 0.0, 0.0))
        return PriorResult(e, src.id, False)
    return PriorResult.identity()
