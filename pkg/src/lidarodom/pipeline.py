"""End-to-end odometry loop and the replay driver.

Per scan: de-skew -> merge -> filter -> prior -> scan-to-scan ->
(flat-ground projection) -> scan-to-submap -> (projection) -> pose
update -> keyframe insert -> emit.
"""

from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .fusion import PriorResult, SensorIntegrator, SourceKind
from .geometry import Pose, Rotation, relative
from .mapping import KeyframePolicy, MapStore, should_insert
from .pointcloud import PointCloud, merge
from .preprocess import FilterConfig, apply_filters, motion_correct
from .registration import (
    EnrichedCloud,
    GicpConfig,
    RegistrationResult,
    enrich,
    scan_to_scan,
    scan_to_submap,
)


class FgaMode(str, Enum):
    OFF = "off"
    FORCED_ON = "forced_on"
    IMU_AUTO = "imu_auto"


def apply_fga(pose: Pose) -> Pose:
    """Zero z, roll and pitch; keep x, y and yaw."""
    _, _, yaw = pose.rotation.to_rpy()
    t = pose.translation
    return Pose(Rotation.from_rpy(0.0, 0.0, yaw), (t[0], t[1], 0.0))


class FgaMonitor:
    """Turns flat-ground mode on after ``window`` seconds of near-level IMU attitude.

    Any sample with |roll| or |pitch| at or above ``angle_tol`` turns it off
    immediately and restarts the flat-period clock.
    """

    def __init__(self, window: float = 5.0, angle_tol: float = math.radians(3.0)) -> None:
        self.window = window
        self.angle_tol = angle_tol
        self.active = False
        self.flat_since: float | None = None
        self.events: list[tuple[float, str]] = []

    def update(self, t: float, rotation: Rotation) -> bool:
        roll, pitch, _ = rotation.to_rpy()
        level = abs(roll) < self.angle_tol and abs(pitch) < self.angle_tol
        if not level:
            self.flat_since = None
            if self.active:
                self.active = False
                self.events.append((t, "deactivate"))
            return self.active
        if self.flat_since is None:
            self.flat_since = t
        if not self.active and t - self.flat_since >= self.window:
            self.active = True
            self.events.append((t, "activate"))
        return self.active


def fga_auto_monitor(imu_stream: Iterable, window: float = 5.0, angle_tol: float = math.radians(3.0)):
    """Activation/deactivation events for a stream of (time, Rotation) or StampedPose items."""
    mon = FgaMonitor(window, angle_tol)
    for item in imu_stream:
        if hasattr(item, "pose"):
            mon.update(item.time, item.pose.rotation)
        else:
            t, rot = item
            mon.update(t, rot)
    return mon.events


@dataclass(frozen=True)
class OdometryOutput:
    stamp: float
    pose: Pose
    prior_source: Optional[str]
    scan_to_scan_converged: bool = False
    scan_to_submap_converged: bool = False
    scan_to_scan_residual: float = math.nan
    scan_to_submap_residual: float = math.nan
    degraded: bool = False
    propagated: bool = False
    iterations: tuple = (0, 0)
    points: int = 0


@dataclass(frozen=True)
class Dropped:
    stamp: float


def drop_policy(busy: bool, scan=None) -> str:
    """No buffering: a scan that arrives while another is in flight is dropped."""
    return "dropped" if busy else "processed"


class DropAccounting:
    """Busy-interval bookkeeping for paced replay.

    A scan arriving strictly before the current one finishes is dropped;
    arrival at the finish time (to within ``EPS`` s of round-off) is free.
    """

    EPS = 1e-9

    def __init__(self) -> None:
        self.busy_until = -math.inf
        self.processed = 0
        self.dropped = 0
        self.first_arrival: float | None = None
        self.last_arrival: float | None = None

    def offer(self, arrival: float) -> bool:
        if self.first_arrival is None:
            self.first_arrival = arrival
        self.last_arrival = arrival
        verdict = drop_policy(arrival < self.busy_until - self.EPS)
        if verdict == "dropped":
            self.dropped += 1
            return False
        self.processed += 1
        return True

    def finish(self, start: float, duration: float) -> None:
        self.busy_until = start + duration

    def drops_per_second(self, scan_period: float) -> float:
        n = self.processed + self.dropped
        if n == 0:
            return 0.0
        return self.dropped / (n * scan_period)


@dataclass
class PipelineParams:
    filters: FilterConfig = field(default_factory=FilterConfig)
    gicp: GicpConfig = field(default_factory=GicpConfig)
    keyframe: KeyframePolicy = field(default_factory=KeyframePolicy)
    map_resolution: float = 0.001
    submap_radius: float = 20.0
    submap_refresh_distance: float = 1.0
    scan_period: float = 0.1
    mdc_enabled: bool = True
    mdc_reference: str = "end"
    fga_mode: FgaMode = FgaMode.OFF
    fga_window: float = 5.0
    fga_angle_tol: float = math.radians(3.0)
    gap_timeout: float = 0.5
    seed: int = 0


class Pipeline:
    """Mutable odometry state plus the per-scan update.

    Poses are robot poses in the world frame, which coincides with the
    robot frame at the first processed scan.
    """

    def __init__(
        self,
        params: PipelineParams | None = None,
        fusion: SensorIntegrator | None = None,
        extrinsics: Sequence[Pose] | None = None,
    ) -> None:
        self.params = params or PipelineParams()
        self.params.filters.validate()
        self.params.gicp.validate()
        self.fusion = fusion or SensorIntegrator()
        self.extrinsics = list(extrinsics) if extrinsics is not None else None
        self.map = MapStore(self.params.map_resolution)
        self.fga_monitor = FgaMonitor(self.params.fga_window, self.params.fga_angle_tol)
        self.pose: Pose | None = None
        self.stamp: float | None = None
        self.prev_scan: EnrichedCloud | None = None
        self.prev_scan_pose: Pose | None = None
        self.last_lidar_time: float | None = None
        self.scans_processed = 0
        self.scans_dropped = 0
        self.scans_degraded = 0
        self.prior_histogram: Counter = Counter()
        self.increments: list[Pose] = []
        self.outputs: list[OdometryOutput] = []
        self._submap: EnrichedCloud | None = None
        self._submap_key: tuple | None = None

    # -- state helpers -------------------------------------------------------

    @property
    def fga_active(self) -> bool:
        mode = self.params.fga_mode
        if mode == FgaMode.FORCED_ON:
            return True
        if mode == FgaMode.IMU_AUTO:
            return self.fga_monitor.active
        return False

    def observe_imu(self, t: float, rotation: Rotation) -> None:
        if self.params.fga_mode == FgaMode.IMU_AUTO:
            self.fga_monitor.update(t, rotation)

    def _flatten(self, pose: Pose) -> Pose:
        return apply_fga(pose) if self.fga_active else pose

    def _emit(self, out: OdometryOutput) -> OdometryOutput:
        if self.stamp is not None and self.pose is not None:
            self.increments.append(relative(self.pose, out.pose))
        self.pose = out.pose
        self.stamp = out.stamp
        self.outputs.append(out)
        return out

    def _prior(self, t_curr: float) -> PriorResult:
        if self.stamp is None or not self.fusion.sources or not t_curr > self.stamp:
            return PriorResult.identity()
        return self.fusion.compute_prior(self.stamp, t_curr)

    def _submap_for(self, guess: Pose) -> EnrichedCloud:
        key = self._submap_key
        center = guess.translation
        if (
            self._submap is None
            or key is None
            or key[0] != self.map.version
            or float(np.linalg.norm(center - key[1])) > self.params.submap_refresh_distance
        ):
            self._submap = self.map.extract_submap(guess, self.params.submap_radius)
            self._submap_key = (self.map.version, center.copy())
        return self._submap

    def _maybe_insert(self, scan: EnrichedCloud, pose: Pose) -> None:
        if should_insert(pose, self.params.keyframe, self.map.last_keyframe):
            self.map.insert(scan.transformed(pose, frame="world"))
            self.map.last_keyframe = pose

    # -- main entry points ---------------------------------------------------

    def preprocess(self, clouds: Sequence[PointCloud]) -> PointCloud:
        p = self.params
        if not clouds:
            raise ValueError("process_scan needs at least one cloud")
        exts = self.extrinsics if self.extrinsics is not None else [Pose.identity()] * len(clouds)
        if len(exts) != len(clouds):
            raise ValueError(f"{len(clouds)} clouds but {len(exts)} lidar extrinsics")
        t_end = clouds[0].stamp + p.scan_period
        corrected = []
        for c, ext in zip(clouds, exts):
            if p.mdc_enabled:
                provider = self.fusion.motion_provider(now=t_end)
                c = motion_correct(c, provider, p.scan_period, ext, p.mdc_reference, p.gicp.workers)
            corrected.append(c)
        merged = merge(corrected, exts)
        merged = PointCloud(t_end, "robot", merged.points, None, merged.meta)
        return apply_filters(merged, p.filters, seed=p.seed + self.scans_processed)

    def process_scan(self, clouds: Sequence[PointCloud]) -> OdometryOutput:
        p = self.params
        scan = self.preprocess(clouds)
        t_k = scan.stamp
        self.last_lidar_time = t_k
        self.scans_processed += 1
        enough = len(scan) >= p.gicp.neighbors_k

        if self.pose is None:
            # first scan defines the world frame
            out = OdometryOutput(t_k, Pose.identity(), None, degraded=not enough, points=len(scan))
            if enough:
                curr = enrich(scan, p.gicp)
                self.prev_scan, self.prev_scan_pose = curr, Pose.identity()
                self._maybe_insert(curr, Pose.identity())
            else:
                self.scans_degraded += 1
            self.prior_histogram["init"] += 1
            return self._emit(out)

        if not t_k > self.stamp:
            raise ValueError(f"scan stamp {t_k} does not advance past {self.stamp}")

        prior = self._prior(t_k)
        self.prior_histogram[prior.source_id or "identity"] += 1

        if not enough or self.prev_scan is None:
            pose = self._flatten(self.pose @ prior.transform)
            if enough:
                curr = enrich(scan, p.gicp)
                self.prev_scan, self.prev_scan_pose = curr, pose
                self._maybe_insert(curr, pose)
            else:
                self.scans_degraded += 1
            return self._emit(
                OdometryOutput(t_k, pose, prior.source_id, degraded=not enough, points=len(scan))
            )

        curr = enrich(scan, p.gicp)
        # the prior spans [last emitted stamp, t_k]; re-anchor it on the previous scan
        guess = relative(self.prev_scan_pose, self.pose @ prior.transform)
        s2s = scan_to_scan(curr, self.prev_scan, PriorResult(guess, prior.source_id, prior.degraded_to_identity), p.gicp)
        world_guess = self._flatten(self.prev_scan_pose @ s2s.transform)

        submap = self._submap_for(world_guess)
        s2m = scan_to_submap(curr, submap, RegistrationResult(world_guess, s2s.converged, s2s.iterations_used,
                                                              s2s.final_residual, s2s.correspondence_fraction), p.gicp)
        pose = self._flatten(s2m.transform)

        self._maybe_insert(curr, pose)
        self.prev_scan, self.prev_scan_pose = curr, pose
        return self._emit(
            OdometryOutput(
                t_k, pose, prior.source_id,
                scan_to_scan_converged=s2s.converged,
                scan_to_submap_converged=s2m.converged and not s2m.skipped,
                scan_to_scan_residual=s2s.final_residual,
                scan_to_submap_residual=s2m.final_residual,
                iterations=(s2s.iterations_used, 0 if s2m.skipped else s2m.iterations_used),
                points=len(scan),
            )
        )

    def in_lidar_gap(self, now: float) -> bool:
        if self.pose is None or self.last_lidar_time is None:
            return False
        return now - self.last_lidar_time >= self.params.gap_timeout

    def propagate(self, now: float) -> OdometryOutput | None:
        """Prior-only pose update while lidar is silent; None if no source can provide one."""
        if self.pose is None or self.stamp is None or not now > self.stamp:
            return None
        prior = self._prior(now)
        if prior.degraded_to_identity:
            return None
        self.prior_histogram[prior.source_id] += 0  # keep the key visible without counting a scan
        pose = self._flatten(self.pose @ prior.transform)
        return self._emit(OdometryOutput(now, pose, prior.source_id, degraded=True, propagated=True))


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    outputs: list = field(default_factory=list)
    durations: list = field(default_factory=list)
    dropped: list = field(default_factory=list)
    accounting: DropAccounting = field(default_factory=DropAccounting)

    def drops_per_second(self, scan_period: float = 0.1) -> float:
        return self.accounting.drops_per_second(scan_period)


def replay(
    events: Iterable,
    pipeline: Pipeline,
    lidar_ids: Sequence[str],
    mode: str = "deterministic",
    sync_tolerance: float = 0.01,
    clock: Callable[[], float] = time.perf_counter,
    on_output: Callable[[OdometryOutput], None] | None = None,
) -> RunResult:
    """Feed a time-ordered event stream through the pipeline.

    Lidar events carry the scan completion time; clouds from different
    lidars within ``sync_tolerance`` form one scan, processed once the
    stream has moved past that time (so prior data up to scan end is in).
    ``mode="paced"`` applies the no-buffering drop rule using measured
    processing durations against stream time.
    """
    if mode not in ("deterministic", "paced"):
        raise ValueError(f"unknown replay mode {mode!r}")
    lidar_ids = list(lidar_ids)
    result = RunResult()
    pending: dict[str, PointCloud] = {}
    pending_time: float | None = None
    imu_ids = {s.id for s in pipeline.fusion.sources.values() if s.kind is SourceKind.ROTATION_ONLY}

    def emit(out):
        if on_output is not None:
            on_output(out)
        result.outputs.append(out)

    def flush():
        nonlocal pending, pending_time
        if not pending:
            return
        arrival = pending_time
        clouds = [pending[i] for i in lidar_ids if i in pending]
        exts = None
        if pipeline.extrinsics is not None and len(clouds) != len(lidar_ids):
            exts = [e for i, e in zip(lidar_ids, pipeline.extrinsics) if i in pending]
        pending, pending_time = {}, None
        pipeline.last_lidar_time = arrival
        if mode == "paced" and not result.accounting.offer(arrival):
            pipeline.scans_dropped += 1
            result.dropped.append(Dropped(arrival))
            return
        if mode == "deterministic":
            result.accounting.offer(arrival)
        saved = pipeline.extrinsics
        if exts is not None:
            pipeline.extrinsics = exts
        t0 = clock()
        try:
            out = pipeline.process_scan(clouds)
        finally:
            pipeline.extrinsics = saved
        dt = clock() - t0
        result.durations.append(dt)
        if mode == "paced":
            result.accounting.finish(arrival, dt)
        emit(out)

    for ev in events:
        if pending and (ev.time > pending_time + sync_tolerance or ev.source_id in pending):
            flush()
        if ev.source_id in lidar_ids:
            if not pending:
                pending_time = ev.time
            pending[ev.source_id] = ev.payload
            continue
        if ev.source_id not in pipeline.fusion.sources:
            continue
        pipeline.fusion.ingest(ev.source_id, ev.payload)
        if ev.source_id in imu_ids:
            pipeline.observe_imu(ev.time, ev.payload.pose.rotation)
        if not pending and pipeline.in_lidar_gap(ev.time) and pipeline.fusion.select(ev.time) == ev.source_id:
            out = pipeline.propagate(ev.time)
            if out is not None:
                emit(out)
    flush()
    return result
