"""Motion distortion correction and the scan filter chain."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

import numpy as np

from . import kernels
from .geometry import Pose, Rotation, StampedPose, interpolate
from .pointcloud import PointCloud, random_downsample, range_filter, voxel_grid_filter

SCAN_PERIOD = 0.1


@dataclass(frozen=True)
class FilterConfig:
    voxel_enabled: bool = True
    voxel_leaf: float = 0.1
    random_enabled: bool = True
    keep_fraction: float = 0.1
    range_min: float = 0.5
    range_max: float = 100.0

    def validate(self) -> None:
        if self.voxel_enabled and not self.voxel_leaf > 0:
            raise ValueError(f"voxel_leaf must be > 0, got {self.voxel_leaf}")
        if self.random_enabled and not 0 < self.keep_fraction <= 1:
            raise ValueError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if not 0 <= self.range_min < self.range_max:
            raise ValueError(f"need 0 <= range_min < range_max, got {self.range_min}, {self.range_max}")


@dataclass(frozen=True)
class MotionSamples:
    """Time-ordered robot poses (in any fixed world frame) used for de-skewing.

    Times up to ``hold_tolerance`` past the newest sample hold the newest
    pose; anything else outside the sample span cannot be corrected.
    """

    times: np.ndarray
    quats: np.ndarray  # (M, 4) wxyz
    trans: np.ndarray  # (M, 3)
    hold_tolerance: float = 0.02

    @classmethod
    def from_poses(cls, times, poses, hold_tolerance: float = 0.02) -> MotionSamples:
        times = np.asarray(times, dtype=float)
        quats = np.array([p.rotation.wxyz for p in poses]).reshape(-1, 4)
        trans = np.array([p.translation for p in poses]).reshape(-1, 3)
        return cls(times, quats, trans, hold_tolerance)

    def _pose(self, i: int) -> Pose:
        return Pose(Rotation(self.quats[i]), self.trans[i])

    def pose_at(self, t: float) -> Optional[Pose]:
        """Interpolated pose at t, or None when t is outside the usable span."""
        times = self.times
        if len(times) == 0:
            return None
        last = float(times[-1])
        if last < t <= last + self.hold_tolerance:
            t = last
        if t < times[0] or t > last:
            return None
        if len(times) == 1:
            return self._pose(0)
        hi = int(np.clip(np.searchsorted(times, t, side="right"), 1, len(times) - 1))
        lo = hi - 1
        return interpolate(
            StampedPose(float(times[lo]), self._pose(lo)), StampedPose(float(times[hi]), self._pose(hi)), t
        )


MotionProvider = Union[MotionSamples, Callable[[float, float], Optional[MotionSamples]]]


def motion_correct(
    c: PointCloud,
    motion: MotionProvider | None,
    scan_period: float = SCAN_PERIOD,
    extrinsic: Pose | None = None,
    reference: str = "end",
    workers: int = 1,
) -> PointCloud:
    """De-skew a scan so every point is expressed at one reference time.

    Each point p captured at ``c.stamp + time_offset`` becomes
    ``relative(pose(t_ref), pose(t_point)) * p`` with t_ref the scan end
    (or start). ``extrinsic`` is the sensor pose in the robot frame when the
    cloud is still in the sensor frame; the output stays in the input frame.

    Points whose capture time the provider cannot bracket are left as-is;
    ``meta["mdc_coverage"]`` reports the corrected fraction.
    """
    if not c.has_timing:
        return replace(c, meta={**c.meta, "mdc": "skipped", "mdc_coverage": 0.0})
    t_ref = c.stamp + (scan_period if reference == "end" else 0.0)
    samples = motion(c.stamp, c.stamp + scan_period) if callable(motion) else motion
    zeros = np.zeros(len(c))
    if samples is None or len(samples.times) == 0:
        return replace(c, stamp=t_ref, time_offsets=zeros, meta={**c.meta, "mdc": "uncorrected", "mdc_coverage": 0.0})
    ref = samples.pose_at(t_ref)
    if ref is None:
        return replace(c, stamp=t_ref, time_offsets=zeros, meta={**c.meta, "mdc": "uncorrected", "mdc_coverage": 0.0})
    pts = c.points if extrinsic is None else extrinsic.apply(c.points)
    out, valid = kernels.active().deskew(
        pts, c.stamp + c.time_offsets, samples.times, samples.quats, samples.trans,
        ref.rotation.wxyz, ref.translation, samples.hold_tolerance, workers,
    )
    if extrinsic is not None:
        out = extrinsic.inverse().apply(out)
    coverage = float(valid.mean()) if len(valid) else 1.0
    return replace(
        c, stamp=t_ref, points=out, time_offsets=zeros,
        meta={**c.meta, "mdc": "applied", "mdc_coverage": coverage},
    )


def apply_filters(c: PointCloud, cfg: FilterConfig, seed: int = 0) -> PointCloud:
    """Range filter, then voxel grid, then random downsample (each optional past range)."""
    out = range_filter(c, cfg.range_min, cfg.range_max)
    if cfg.voxel_enabled:
        out = voxel_grid_filter(out, cfg.voxel_leaf)
    if cfg.random_enabled:
        out = random_downsample(out, cfg.keep_fraction, seed)
    return out
