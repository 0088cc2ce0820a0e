"""Synthetic worlds, a spinning multi-beam lidar model and matching odometry/IMU logs.

Worlds are axis-aligned boxes (either solid obstacles, or an enclosing
room seen from inside) plus optional infinite planes. Everything is
exact and seeded, so the ground truth is analytic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from dataclasses import fields as dataclasses_fields
from pathlib import Path
from typing import Sequence

import numpy as np

from ..fusion import SourceKind
from ..geometry import Pose, Rotation, StampedPose, interpolate, quat_slerp, quat_to_matrix
from ..pointcloud import PointCloud
from .dataset import Dataset, Event, LidarStream, PoseStream, write_manifest
from .formats import write_cloud, write_clouds_binary, write_trajectory

_EPS = 1e-9


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    inside: bool = False  # True: an enclosure seen from within

    def __post_init__(self):
        if not all(h > l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate box {self.lo} .. {self.hi}")


@dataclass(frozen=True)
class Plane:
    normal: tuple
    offset: float  # points p with normal . p = offset


@dataclass(frozen=True)
class World:
    boxes: tuple = ()
    planes: tuple = ()

    def raycast(self, origins: np.ndarray, dirs: np.ndarray, max_range: float = np.inf) -> np.ndarray:
        """Distance to the first surface along each unit ray (inf when nothing is hit)."""
        o = np.asarray(origins, dtype=float).reshape(-1, 3)
        d = np.asarray(dirs, dtype=float).reshape(-1, 3)
        o = np.broadcast_to(o, d.shape)
        best = np.full(len(d), np.inf)
        safe = np.where(np.abs(d) < 1e-15, 1e-15, d)
        inv = 1.0 / safe
        for b in self.boxes:
            t1 = (np.asarray(b.lo) - o) * inv
            t2 = (np.asarray(b.hi) - o) * inv
            tmin = np.minimum(t1, t2).max(axis=1)
            tmax = np.maximum(t1, t2).min(axis=1)
            if b.inside:
                t = np.where((tmax > _EPS) & (tmin <= tmax), tmax, np.inf)
            else:
                t = np.where((tmin > _EPS) & (tmin <= tmax), tmin, np.inf)
            best = np.minimum(best, t)
        for p in self.planes:
            n = np.asarray(p.normal, dtype=float)
            n = n / np.linalg.norm(n)
            den = d @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (p.offset - o @ n) / den
            best = np.minimum(best, np.where((np.abs(den) > 1e-12) & (t > _EPS), t, np.inf))
        best[best > max_range] = np.inf
        return best

    def _occluded(self, pts: np.ndarray) -> np.ndarray:
        """Points strictly inside a solid box or outside an enclosure."""
        bad = np.zeros(len(pts), dtype=bool)
        for b in self.boxes:
            lo, hi = np.asarray(b.lo), np.asarray(b.hi)
            if b.inside:
                bad |= np.any((pts < lo - 1e-9) | (pts > hi + 1e-9), axis=1)
            else:
                bad |= np.all((pts > lo + 1e-9) & (pts < hi - 1e-9), axis=1)
        return bad

    def sample_surfaces(self, spacing: float, lo, hi, seed: int = 0) -> np.ndarray:
        """Samples of every visible surface inside the axis-aligned bounds [lo, hi].

        Stratified: one uniform sample per ``spacing`` square cell. A regular
        grid would alias with itself under in-plane shifts and trap ICP.
        """
        if not spacing > 0:
            raise ValueError("spacing must be positive")
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        rng = np.random.default_rng(seed)

        def cells(a, b):
            start = np.arange(a, b + 1e-12, spacing)
            width = np.minimum(spacing, b - start)
            return start, width

        def jitter(su, wu, sv, wv):
            uu, vv = np.meshgrid(su, sv, indexing="ij")
            du, dv = np.meshgrid(wu, wv, indexing="ij")
            return (uu + rng.uniform(0, 1, uu.shape) * du).ravel(), (vv + rng.uniform(0, 1, vv.shape) * dv).ravel()

        chunks = []
        for b in self.boxes:
            blo = np.maximum(np.asarray(b.lo, float), lo)
            bhi = np.minimum(np.asarray(b.hi, float), hi)
            for axis in range(3):
                for face in (b.lo[axis], b.hi[axis]):
                    if not lo[axis] <= face <= hi[axis]:
                        continue
                    u, v = [a for a in range(3) if a != axis]
                    if bhi[u] < blo[u] or bhi[v] < blo[v]:
                        continue
                    uu, vv = jitter(*cells(blo[u], bhi[u]), *cells(blo[v], bhi[v]))
                    pts = np.empty((uu.size, 3))
                    pts[:, axis] = face
                    pts[:, u] = uu
                    pts[:, v] = vv
                    chunks.append(pts)
        for p in self.planes:
            n = np.asarray(p.normal, float)
            n = n / np.linalg.norm(n)
            axis = int(np.argmax(np.abs(n)))
            u, v = [a for a in range(3) if a != axis]
            uu, vv = jitter(*cells(lo[u], hi[u]), *cells(lo[v], hi[v]))
            pts = np.empty((uu.size, 3))
            pts[:, u] = uu
            pts[:, v] = vv
            pts[:, axis] = (p.offset - n[u] * pts[:, u] - n[v] * pts[:, v]) / n[axis]
            chunks.append(pts)
        if not chunks:
            return np.empty((0, 3))
        pts = np.concatenate(chunks)
        keep = np.all((pts >= lo - 1e-9) & (pts <= hi + 1e-9), axis=1) & ~self._occluded(pts)
        return pts[keep]


def room_world(size=(10.0, 8.0, 3.0), floor: float = -0.5, obstacles: bool = True) -> World:
    """A closed room centred on the origin in x, y with the floor ``-floor`` below the sensor."""
    sx, sy, sz = size
    boxes = [Box((-sx / 2, -sy / 2, floor), (sx / 2, sy / 2, floor + sz), inside=True)]
    if obstacles:
        boxes.append(Box((1.5, 1.0, floor), (2.5, 2.2, floor + 1.2)))
        boxes.append(Box((-3.0, -2.5, floor), (-2.2, -1.0, floor + 2.0)))
    return World(tuple(boxes))


def corridor_world(
    length: float = 40.0,
    width: float = 4.0,
    height: float = 3.0,
    floor: float = -0.5,
    start: float = -5.0,
    pillar_spacing: float = 3.0,
    pillar_size: float = 0.4,
) -> World:
    """A long closed corridor along +x with pillars alternating on the two walls.

    The pillars and crates break the along-track symmetry that plain walls
    would leave unconstrained.
    """
    half = width / 2
    boxes = [Box((start, -half, floor), (start + length, half, floor + height), inside=True)]
    x = start + 1.5
    side = 1
    while x + pillar_size < start + length - 0.5:
        if side > 0:
            boxes.append(Box((x, half - pillar_size, floor), (x + pillar_size, half, floor + height)))
        else:
            boxes.append(Box((x, -half, floor), (x + pillar_size, -half + pillar_size, floor + height)))
        side = -side
        x += pillar_spacing
    x = start + 3.0
    while x + 0.6 < start + length - 0.5:
        boxes.append(Box((x, -0.3, floor), (x + 0.5, 0.3, floor + 0.35)))
        x += 7.0
    return World(tuple(boxes))


class Trajectory:
    """Piecewise constant-velocity motion through timed waypoints (lerp + slerp between them)."""

    def __init__(self, times: Sequence[float], poses: Sequence[Pose]) -> None:
        if len(times) != len(poses) or not times:
            raise ValueError("need matching, non-empty waypoint times and poses")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("waypoint times must be strictly increasing")
        self.times = np.asarray(times, dtype=float)
        self.poses = list(poses)

    @classmethod
    def from_waypoints(cls, rows) -> Trajectory:
        """Rows of ``t x y z roll pitch yaw`` (angles in radians)."""
        rows = np.asarray(rows, dtype=float).reshape(-1, 7)
        return cls(list(rows[:, 0]), [Pose.from_rpy(*r[1:]) for r in rows])

    @classmethod
    def straight(cls, velocity=(1.0, 0.0, 0.0), duration: float = 5.0, start: Pose | None = None) -> Trajectory:
        start = start or Pose.identity()
        end = Pose(start.rotation, start.translation + np.asarray(velocity, float) * duration)
        return cls([0.0, duration], [start, end])

    @classmethod
    def spin(cls, yaw_rate: float, duration: float, steps: int = 64) -> Trajectory:
        ts = np.linspace(0.0, duration, steps + 1)
        return cls(list(ts), [Pose(Rotation.from_rpy(0.0, 0.0, yaw_rate * t)) for t in ts])

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    def sample(self, times) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized pose_at: (wxyz quaternions, translations) for an array of times."""
        t = np.clip(np.asarray(times, dtype=float), self.times[0], self.times[-1])
        quats = np.array([p.rotation.wxyz for p in self.poses])
        trans = np.array([p.translation for p in self.poses])
        if len(self.times) == 1:
            return np.repeat(quats, len(t), axis=0), np.repeat(trans, len(t), axis=0)
        hi = np.clip(np.searchsorted(self.times, t, side="right"), 1, len(self.times) - 1)
        lo = hi - 1
        s = (t - self.times[lo]) / (self.times[hi] - self.times[lo])
        q = quat_slerp(quats[lo], quats[hi], s)
        p = (1.0 - s)[:, None] * trans[lo] + s[:, None] * trans[hi]
        return q, p

    def pose_at(self, t: float) -> Pose:
        if t <= self.times[0]:
            return self.poses[0]
        if t >= self.times[-1]:
            return self.poses[-1]
        hi = int(np.searchsorted(self.times, t, side="right"))
        lo = hi - 1
        return interpolate(
            StampedPose(float(self.times[lo]), self.poses[lo]), StampedPose(float(self.times[hi]), self.poses[hi]), t
        )


@dataclass(frozen=True)
class LidarSpec:
    channels: int = 16
    fov_down: float = -15.0  # degrees
    fov_up: float = 15.0
    azimuth_steps: int = 900
    max_range: float = 100.0
    noise_sigma: float = 0.01
    scan_period: float = 0.1
    per_point_timing: bool = True

    def validate(self) -> None:
        if self.channels < 1 or self.azimuth_steps < 1:
            raise ValueError("lidar needs at least one channel and one azimuth step")
        if not self.scan_period > 0 or not self.max_range > 0 or self.noise_sigma < 0:
            raise ValueError("invalid lidar scan period, range or noise")

    def unit_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """(azimuth_steps, channels, 3) directions in the sensor frame and per-column time fractions."""
        el = np.radians(np.linspace(self.fov_down, self.fov_up, self.channels)) if self.channels > 1 else np.zeros(1)
        az = 2 * np.pi * np.arange(self.azimuth_steps) / self.azimuth_steps
        ce, se = np.cos(el), np.sin(el)
        dirs = np.stack(
            [np.cos(az)[:, None] * ce[None, :], np.sin(az)[:, None] * ce[None, :], np.broadcast_to(se, (len(az), len(el)))],
            axis=-1,
        )
        return dirs, np.arange(self.azimuth_steps) / self.azimuth_steps


@dataclass(frozen=True)
class SourceSpec:
    id: str
    kind: SourceKind = SourceKind.FULL_ODOMETRY
    rate: float = 50.0
    noise_translation: float = 0.0
    noise_rotation: float = 0.0  # radians
    extrinsic: Pose = field(default_factory=Pose.identity)


def scan_world(
    world: World,
    traj: Trajectory,
    lidar: LidarSpec,
    stamp: float,
    extrinsic: Pose | None = None,
    rng: np.random.Generator | None = None,
    frame: str = "lidar",
) -> PointCloud:
    """One sweep starting at ``stamp``; points in the sensor frame at their own capture time."""
    extrinsic = extrinsic or Pose.identity()
    dirs, frac = lidar.unit_rays()
    offsets = frac * lidar.scan_period if lidar.per_point_timing else np.zeros_like(frac)
    n_az, n_ch = dirs.shape[:2]
    q, p = traj.sample(stamp + offsets)
    r_robot = quat_to_matrix(q)
    rots = r_robot @ extrinsic.rotation.as_matrix()
    origins = p + r_robot @ extrinsic.translation
    world_dirs = np.einsum("aij,acj->aci", rots, dirs)
    ranges = world.raycast(np.repeat(origins, n_ch, axis=0), world_dirs.reshape(-1, 3), lidar.max_range)
    hit = np.isfinite(ranges)
    if not hit.any():
        raise ValueError(f"no surface hit by the scan at t={stamp}")
    if rng is not None and lidar.noise_sigma > 0:
        ranges = ranges + rng.normal(0.0, lidar.noise_sigma, len(ranges))
    pts = dirs.reshape(-1, 3)[hit] * ranges[hit, None]
    times = np.repeat(offsets, n_ch)[hit]
    return PointCloud(stamp, frame, pts, times)


def pose_log(traj: Trajectory, spec: SourceSpec, t0: float, t1: float, rng: np.random.Generator) -> list[StampedPose]:
    """Samples of ``traj`` at ``spec.rate`` over [t0, t1], expressed in the source frame."""
    n = int(math.floor((t1 - t0) * spec.rate + 1e-9)) + 1
    ext = spec.extrinsic
    ext_inv = ext.inverse()
    out = []
    for k in range(n):
        t = t0 + k / spec.rate
        x = traj.pose_at(t)
        if spec.noise_translation > 0 or spec.noise_rotation > 0:
            x = Pose.exp(
                np.concatenate([rng.normal(0.0, spec.noise_translation, 3), rng.normal(0.0, spec.noise_rotation, 3)])
            ) @ x
        y = ext_inv @ x @ ext
        if spec.kind is SourceKind.ROTATION_ONLY:
            y = Pose(y.rotation)
        out.append(StampedPose(round(t, 9), y))
    return out


@dataclass
class SyntheticRun:
    """A generated dataset held in memory."""

    world: World
    trajectory: Trajectory
    lidar: LidarSpec
    lidar_ids: list
    lidar_extrinsics: list
    scans: dict  # lidar id -> list[PointCloud]
    logs: dict  # source id -> list[StampedPose]
    sources: list
    gt: list  # StampedPose at gt_rate

    def events(self):
        evs = []
        for lid in self.lidar_ids:
            kind = "lidar"
            evs += [Event(c.stamp + self.lidar.scan_period, lid, kind, c) for c in self.scans[lid]]
        for s in self.sources:
            kind = "imu" if s.kind is SourceKind.ROTATION_ONLY else "odometry"
            evs += [Event(p.time, s.id, kind, p) for p in self.logs[s.id]]
        evs.sort(key=lambda e: (e.time, e.source_id))
        return evs

    def gt_at_scans(self) -> list[StampedPose]:
        """Ground-truth robot poses at every scan completion time."""
        period = self.lidar.scan_period
        return [StampedPose(c.stamp + period, self.trajectory.pose_at(c.stamp + period)) for c in self.scans[self.lidar_ids[0]]]

    def gt_map(self, spacing: float = 0.025, margin: float = 0.0, lo=None, hi=None) -> PointCloud:
        """Surface samples inside [lo, hi] (default: everything within max range of the path)."""
        if lo is None or hi is None:
            path = np.array([p.pose.translation for p in self.gt])
            r = min(self.lidar.max_range, 1e3)
            lo = path.min(axis=0) - r - margin
            hi = path.max(axis=0) + r + margin
        return PointCloud(0.0, "world", self.world.sample_surfaces(spacing, lo, hi))

    def write(self, out_dir, binary: bool = True, gt_map_spacing: float | None = None) -> Path:
        """Write clouds, pose logs, ground truth and a manifest; returns the manifest path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ds = Dataset(out, self.lidar.scan_period)
        for lid, ext in zip(self.lidar_ids, self.lidar_extrinsics):
            f = out / f"{lid}.{'bin' if binary else 'clouds'}"
            if binary:
                write_clouds_binary(f, self.scans[lid])
            else:
                from .formats import write_clouds

                write_clouds(f, self.scans[lid])
            ds.lidars.append(LidarStream(lid, ext, (f,)))
        for s in self.sources:
            f = out / f"{s.id}.txt"
            write_trajectory(f, self.logs[s.id])
            ds.sources.append(PoseStream(s.id, s.kind, s.rate, s.extrinsic, f))
        gt = out / "groundtruth.txt"
        write_trajectory(gt, self.gt)
        ds.gt_trajectory = gt
        if gt_map_spacing:
            m = out / "groundtruth_map.txt"
            write_cloud(m, self.gt_map(gt_map_spacing))
            ds.gt_map = m
        manifest = out / "dataset.yaml"
        write_manifest(manifest, ds)
        return manifest


def generate_synthetic(
    world: World,
    trajectory: Trajectory,
    lidar: LidarSpec,
    n_scans: int,
    seed: int = 0,
    sources: Sequence[SourceSpec] = (SourceSpec("wio"), SourceSpec("imu", SourceKind.ROTATION_ONLY)),
    lidar_extrinsics: Sequence[Pose] = (Pose.identity(),),
    t0: float = 0.0,
    gt_rate: float = 100.0,
) -> SyntheticRun:
    """Ray-cast ``n_scans`` sweeps per lidar from ``t0`` and sample every source over the same span."""
    lidar.validate()
    if n_scans < 1:
        raise ValueError("n_scans must be >= 1")
    rng = np.random.default_rng(seed)
    ids = [f"lidar{i}" for i in range(len(lidar_extrinsics))]
    scans = {i: [] for i in ids}
    for k in range(n_scans):
        stamp = round(t0 + k * lidar.scan_period, 9)
        for lid, ext in zip(ids, lidar_extrinsics):
            scans[lid].append(scan_world(world, trajectory, lidar, stamp, ext, rng))
    t_end = t0 + n_scans * lidar.scan_period
    logs = {s.id: pose_log(trajectory, s, t0, t_end, rng) for s in sources}
    gt_spec = SourceSpec("gt", rate=gt_rate)
    gt = pose_log(trajectory, gt_spec, t0, t_end, rng)
    return SyntheticRun(world, trajectory, lidar, ids, list(lidar_extrinsics), scans, logs, list(sources), gt)


def corridor_run(
    n_scans: int = 50,
    step: float = 0.1,
    noise_sigma: float = 0.01,
    seed: int = 0,
    sources: Sequence[SourceSpec] | None = None,
    lidar: LidarSpec | None = None,
    length: float | None = None,
) -> SyntheticRun:
    """Straight corridor drive at ``step`` metres per scan."""
    lidar = lidar or LidarSpec(noise_sigma=noise_sigma)
    speed = step / lidar.scan_period
    duration = (n_scans + 1) * lidar.scan_period
    if length is None:
        length = max(40.0, speed * duration + 25.0)
    world = corridor_world(length=length)
    traj = Trajectory.straight((speed, 0.0, 0.0), duration)
    srcs = sources if sources is not None else (SourceSpec("wio"), SourceSpec("imu", SourceKind.ROTATION_ONLY))
    return generate_synthetic(world, traj, lidar, n_scans, seed, srcs)


# -- YAML generator specs ----------------------------------------------------

_SPEC_KEYS = {"world", "trajectory", "sensor", "lidars", "sources", "scans", "seed", "binary", "gt_map_spacing", "start_time"}


def _keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ValueError(f"{where} must be a mapping")
    extra = set(d) - set(allowed)
    if extra:
        raise ValueError(f"{where}: unknown keys {sorted(extra)}")
    return d


def world_from_spec(d: dict) -> World:
    d = dict(_keys(d, {"type", "length", "width", "height", "size", "floor", "start", "pillar_spacing",
                       "pillar_size", "obstacles", "boxes", "planes"}, "world"))
    kind = d.pop("type", "corridor")
    if kind == "corridor":
        return corridor_world(**d)
    if kind == "room":
        if "size" in d:
            d["size"] = tuple(d["size"])
        return room_world(**d)
    if kind == "boxes":
        boxes = tuple(Box(tuple(b["lo"]), tuple(b["hi"]), bool(b.get("inside", False))) for b in d.get("boxes", []))
        planes = tuple(Plane(tuple(p["normal"]), float(p["offset"])) for p in d.get("planes", []))
        if not boxes and not planes:
            raise ValueError("world has no surfaces")
        return World(boxes, planes)
    raise ValueError(f"unknown world type {kind!r}")


def trajectory_from_spec(d: dict) -> Trajectory:
    d = dict(_keys(d, {"type", "velocity", "duration", "waypoints", "yaw_rate", "steps"}, "trajectory"))
    kind = d.pop("type", "straight")
    if kind == "straight":
        return Trajectory.straight(tuple(d.get("velocity", (1.0, 0.0, 0.0))), float(d.get("duration", 5.1)))
    if kind == "waypoints":
        return Trajectory.from_waypoints(d["waypoints"])
    if kind == "spin":
        return Trajectory.spin(float(d["yaw_rate"]), float(d.get("duration", 5.0)), int(d.get("steps", 64)))
    raise ValueError(f"unknown trajectory type {kind!r}")


def run_from_spec(spec: dict, seed: int | None = None) -> tuple[SyntheticRun, dict]:
    """Generate from a parsed YAML spec; returns the run and the write options."""
    spec = _keys(spec or {}, _SPEC_KEYS, "synthetic spec")
    lidar = LidarSpec(**_keys(spec.get("sensor", {}), {f.name for f in dataclasses_fields(LidarSpec)}, "sensor"))
    exts = [Pose.from_array7(e) for e in spec.get("lidars", [[0, 0, 0, 0, 0, 0, 1]])]
    sources = []
    for i, s in enumerate(spec.get("sources", [{"id": "wio"}, {"id": "imu", "kind": "imu"}])):
        _keys(s, {"id", "kind", "rate", "noise_translation", "noise_rotation", "extrinsic"}, f"sources[{i}]")
        sources.append(
            SourceSpec(
                str(s["id"]), SourceKind.parse(s.get("kind", "odometry")), float(s.get("rate", 50.0)),
                float(s.get("noise_translation", 0.0)), float(s.get("noise_rotation", 0.0)),
                Pose.from_array7(s["extrinsic"]) if "extrinsic" in s else Pose.identity(),
            )
        )
    run = generate_synthetic(
        world_from_spec(spec.get("world", {"type": "corridor"})),
        trajectory_from_spec(spec.get("trajectory", {"type": "straight"})),
        lidar,
        int(spec.get("scans", 50)),
        int(spec.get("seed", 0) if seed is None else seed),
        sources,
        exts,
        float(spec.get("start_time", 0.0)),
    )
    return run, {"binary": bool(spec.get("binary", True)), "gt_map_spacing": spec.get("gt_map_spacing")}
