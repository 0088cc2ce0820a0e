"""On-disk formats: clouds (ASCII and binary), trajectories, key-value results, gnuplot data.

ASCII cloud block::

    stamp frame count
    x y z time_offset      (count lines)

A cloud log is any number of blocks back to back. Trajectories are one
``stamp tx ty tz qx qy qz qw`` record per line. Blank lines and ``#``
comments are ignored by every ASCII reader.
"""

from __future__ import annotations

import io as _io
import struct
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from ..geometry import Pose, StampedPose
from ..pointcloud import PointCloud

BINARY_MAGIC = b"LOCL"
_HEADER = struct.Struct("<4sdIH")  # magic, stamp, count, frame length


class FormatError(ValueError):
    """A parse failure that names the file and line."""

    def __init__(self, path, line: int | None, msg: str) -> None:
        where = f"{path}:{line}" if line is not None else f"{path}"
        super().__init__(f"{where}: {msg}")
        self.path = str(path)
        self.line = line


def _fmt(x: float) -> str:
    return repr(float(x))


def _data_lines(path) -> Iterator[tuple[int, list[str]]]:
    with open(path, "r", encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            s = raw.split("#", 1)[0].strip()
            if s:
                yield n, s.split()


def _floats(path, n: int, fields: list[str], expect: int) -> list[float]:
    if len(fields) != expect:
        raise FormatError(path, n, f"expected {expect} fields, got {len(fields)}")
    try:
        return [float(f) for f in fields]
    except ValueError as e:
        raise FormatError(path, n, str(e)) from None


# -- clouds ------------------------------------------------------------------


def write_clouds(path, clouds: Iterable[PointCloud]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in clouds:
            if not c.frame or any(ch.isspace() for ch in c.frame):
                raise ValueError(f"frame name {c.frame!r} must be a single token")
            fh.write(f"{_fmt(c.stamp)} {c.frame} {len(c)}\n")
            buf = _io.StringIO()
            np.savetxt(buf, np.column_stack([c.points, c.time_offsets]), fmt="%.17g")
            fh.write(buf.getvalue())


def write_cloud(path, c: PointCloud) -> None:
    write_clouds(path, [c])


def iter_clouds(path) -> Iterator[PointCloud]:
    """Stream the blocks of an ASCII cloud log in file order."""
    lines = _data_lines(path)
    for n, head in lines:
        if len(head) != 3:
            raise FormatError(path, n, f"cloud header needs 'stamp frame count', got {' '.join(head)!r}")
        try:
            stamp = float(head[0])
            count = int(head[2])
        except ValueError as e:
            raise FormatError(path, n, str(e)) from None
        if count < 0:
            raise FormatError(path, n, f"negative point count {count}")
        rows = np.empty((count, 4))
        for i in range(count):
            try:
                m, fields = next(lines)
            except StopIteration:
                raise FormatError(path, None, f"cloud at line {n} declares {count} points, file ends after {i}") from None
            rows[i] = _floats(path, m, fields, 4)
        yield PointCloud(stamp, head[1], rows[:, :3], rows[:, 3])


def read_clouds(path) -> list[PointCloud]:
    return list(iter_clouds(path))


def read_cloud(path) -> PointCloud:
    clouds = read_clouds(path)
    if len(clouds) != 1:
        raise FormatError(path, None, f"expected one cloud, found {len(clouds)}")
    return clouds[0]


def write_clouds_binary(path, clouds: Iterable[PointCloud]) -> None:
    with open(path, "wb") as fh:
        for c in clouds:
            frame = c.frame.encode("utf-8")
            fh.write(_HEADER.pack(BINARY_MAGIC, float(c.stamp), len(c), len(frame)))
            fh.write(frame)
            fh.write(np.column_stack([c.points, c.time_offsets]).astype("<f8").tobytes())


def iter_clouds_binary(path) -> Iterator[PointCloud]:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    while pos < len(data):
        if len(data) - pos < _HEADER.size:
            raise FormatError(path, None, f"truncated header at byte {pos}")
        magic, stamp, count, flen = _HEADER.unpack_from(data, pos)
        if magic != BINARY_MAGIC:
            raise FormatError(path, None, f"bad magic at byte {pos}")
        pos += _HEADER.size
        frame = data[pos : pos + flen].decode("utf-8")
        pos += flen
        nbytes = count * 32
        if len(data) - pos < nbytes:
            raise FormatError(path, None, f"truncated point block at byte {pos}")
        rows = np.frombuffer(data, dtype="<f8", count=count * 4, offset=pos).reshape(count, 4)
        pos += nbytes
        yield PointCloud(stamp, frame, rows[:, :3].copy(), rows[:, 3].copy())


def read_clouds_binary(path) -> list[PointCloud]:
    return list(iter_clouds_binary(path))


def is_binary_cloud_file(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == BINARY_MAGIC


def load_clouds(path) -> Iterator[PointCloud]:
    """Either cloud encoding, sniffed from the first bytes."""
    return iter_clouds_binary(path) if is_binary_cloud_file(path) else iter_clouds(path)


# -- trajectories ------------------------------------------------------------


def format_pose_record(stamp: float, pose: Pose) -> str:
    a = pose.as_array7()
    return " ".join(_fmt(v) for v in (stamp, *a))


def write_trajectory(path, poses: Iterable[StampedPose]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in poses:
            fh.write(format_pose_record(p.time, p.pose) + "\n")


def iter_trajectory(path, strict: bool = True) -> Iterator[StampedPose]:
    """Records in file order; with ``strict`` a stamp that does not increase is an error."""
    last = None
    for n, fields in _data_lines(path):
        v = _floats(path, n, fields, 8)
        if strict and last is not None and not v[0] > last:
            raise FormatError(path, n, f"stamp {v[0]} does not increase past {last}")
        last = v[0]
        try:
            yield StampedPose(v[0], Pose.from_array7(v[1:]))
        except ValueError as e:
            raise FormatError(path, n, str(e)) from None


def read_trajectory(path, strict: bool = True) -> list[StampedPose]:
    return list(iter_trajectory(path, strict))


# -- results and plots -------------------------------------------------------


def write_results(path, values: dict) -> None:
    """One ``key = value`` line per entry, in insertion order."""
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in values.items():
            if isinstance(v, float):
                v = repr(v)
            fh.write(f"{k} = {v}\n")


def read_results(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            s = raw.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise FormatError(path, n, "expected 'key = value'")
            k, v = (x.strip() for x in s.split("=", 1))
            try:
                out[k] = int(v)
            except ValueError:
                try:
                    out[k] = float(v)
                except ValueError:
                    out[k] = v
    return out


def write_gnuplot(path, columns: dict[str, Sequence[float]]) -> None:
    """Whitespace-separated columns with a commented header naming them."""
    names = list(columns)
    data = np.column_stack([np.asarray(columns[k], dtype=float) for k in names]) if names else np.empty((0, 0))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + " ".join(names) + "\n")
        if data.size:
            np.savetxt(fh, data, fmt="%.9g")


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
