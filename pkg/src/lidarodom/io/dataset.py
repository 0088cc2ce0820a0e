"""Dataset manifests and the merged, time-ordered event stream."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import yaml

from ..fusion import SourceKind
from ..geometry import Pose
from .formats import FormatError, iter_trajectory, load_clouds


class Event(NamedTuple):
    """One stream item. Lidar events are timed at scan completion."""

    time: float
    source_id: str
    kind: str  # "lidar" | "odometry" | "imu"
    payload: object


@dataclass(frozen=True)
class LidarStream:
    id: str
    extrinsic: Pose
    files: tuple


@dataclass(frozen=True)
class PoseStream:
    id: str
    kind: SourceKind
    rate: float
    extrinsic: Pose
    log: Path


@dataclass
class Dataset:
    root: Path
    scan_period: float
    lidars: list = field(default_factory=list)
    sources: list = field(default_factory=list)
    gt_trajectory: Path | None = None
    gt_map: Path | None = None

    @property
    def lidar_ids(self) -> list[str]:
        return [l.id for l in self.lidars]

    def events(self) -> Iterator[Event]:
        """All streams merged by (time, source id); each stream must be time-ordered."""
        streams = [self._lidar_events(l) for l in self.lidars]
        streams += [self._pose_events(s) for s in self.sources]
        return heapq.merge(*streams, key=lambda e: (e.time, e.source_id))

    __iter__ = events

    def _lidar_events(self, lidar: LidarStream) -> Iterator[Event]:
        last = None
        for f in lidar.files:
            for c in load_clouds(f):
                if last is not None and not c.stamp > last:
                    raise FormatError(f, None, f"lidar stamp {c.stamp} does not increase past {last}")
                last = c.stamp
                yield Event(c.stamp + self.scan_period, lidar.id, "lidar", c)

    def _pose_events(self, src: PoseStream) -> Iterator[Event]:
        kind = "imu" if src.kind is SourceKind.ROTATION_ONLY else "odometry"
        for sp in iter_trajectory(src.log, strict=True):
            yield Event(sp.time, src.id, kind, sp)


_TOP_KEYS = {"scan_period", "lidars", "sources", "ground_truth"}


def _pose(value, where: str) -> Pose:
    if value is None:
        return Pose.identity()
    try:
        return Pose.from_array7(value)
    except (ValueError, TypeError) as e:
        raise ValueError(f"{where}: extrinsic must be [tx, ty, tz, qx, qy, qz, qw] ({e})") from None


def _check_keys(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ValueError(f"{where}: expected a mapping")
    extra = set(d) - allowed
    if extra:
        raise ValueError(f"{where}: unknown keys {sorted(extra)}")


def load_dataset(manifest) -> Dataset:
    """Parse a YAML manifest; every referenced file must exist."""
    path = Path(manifest)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            raise FormatError(path, mark.line + 1 if mark else None, "invalid YAML") from None
    _check_keys(data, _TOP_KEYS, str(path))
    root = path.parent

    def resolve(p, where):
        f = (root / p).resolve()
        if not f.is_file():
            raise FileNotFoundError(f"{path}: {where} references missing file {p}")
        return f

    period = float(data.get("scan_period", 0.1))
    if not period > 0:
        raise ValueError(f"{path}: scan_period must be positive")
    ds = Dataset(root, period)
    seen = set()
    for i, l in enumerate(data.get("lidars") or []):
        where = f"{path}: lidars[{i}]"
        _check_keys(l, {"id", "extrinsic", "log", "files"}, where)
        if ("log" in l) == ("files" in l):
            raise ValueError(f"{where}: give exactly one of 'log' or 'files'")
        files = [l["log"]] if "log" in l else list(l["files"])
        ds.lidars.append(LidarStream(str(l["id"]), _pose(l.get("extrinsic"), where), tuple(resolve(f, where) for f in files)))
    for i, s in enumerate(data.get("sources") or []):
        where = f"{path}: sources[{i}]"
        _check_keys(s, {"id", "kind", "rate", "extrinsic", "log"}, where)
        ds.sources.append(
            PoseStream(
                str(s["id"]), SourceKind.parse(s.get("kind", "odometry")), float(s.get("rate", 50.0)),
                _pose(s.get("extrinsic"), where), resolve(s["log"], where),
            )
        )
    for sid in ds.lidar_ids + [s.id for s in ds.sources]:
        if sid in seen:
            raise ValueError(f"{path}: duplicate stream id {sid!r}")
        seen.add(sid)
    if not ds.lidars:
        raise ValueError(f"{path}: no lidar streams declared")
    gt = data.get("ground_truth") or {}
    _check_keys(gt, {"trajectory", "map"}, f"{path}: ground_truth")
    if "trajectory" in gt:
        ds.gt_trajectory = resolve(gt["trajectory"], "ground_truth")
    if "map" in gt:
        ds.gt_map = resolve(gt["map"], "ground_truth")
    return ds


def write_manifest(path, dataset: Dataset) -> None:
    root = Path(path).parent

    def rel(p):
        return str(Path(p).resolve().relative_to(root.resolve()))

    data = {
        "scan_period": dataset.scan_period,
        "lidars": [
            {"id": l.id, "extrinsic": [float(v) for v in l.extrinsic.as_array7()], "files": [rel(f) for f in l.files]}
            for l in dataset.lidars
        ],
        "sources": [
            {
                "id": s.id, "kind": s.kind.value, "rate": s.rate,
                "extrinsic": [float(v) for v in s.extrinsic.as_array7()], "log": rel(s.log),
            }
            for s in dataset.sources
        ],
    }
    gt = {}
    if dataset.gt_trajectory:
        gt["trajectory"] = rel(dataset.gt_trajectory)
    if dataset.gt_map:
        gt["map"] = rel(dataset.gt_map)
    if gt:
        data["ground_truth"] = gt
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)
