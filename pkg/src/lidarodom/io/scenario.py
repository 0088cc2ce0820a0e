"""Scripted failure injection over an event stream."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import yaml

ACTIONS = ("drop_source", "restore_source", "lidar_gap")


@dataclass(frozen=True)
class ScenarioEvent:
    time: float
    action: str
    source_id: str | None = None
    duration: float = 0.0

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown scenario action {self.action!r}")
        if self.action in ("drop_source", "restore_source") and not self.source_id:
            raise ValueError(f"{self.action} needs a source id")
        if self.action == "lidar_gap" and not self.duration > 0:
            raise ValueError("lidar_gap needs a positive duration")


@dataclass(frozen=True)
class ScenarioScript:
    events: tuple = ()

    def __post_init__(self):
        times = [e.time for e in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("scenario event times must be non-decreasing")

    @classmethod
    def from_dict(cls, data: dict | None) -> ScenarioScript:
        data = data or {}
        unknown = set(data) - {"events"}
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        events = []
        for i, e in enumerate(data.get("events") or []):
            extra = set(e) - {"time", "action", "id", "duration"}
            if extra:
                raise ValueError(f"scenario event {i}: unknown keys {sorted(extra)}")
            events.append(ScenarioEvent(float(e["time"]), e["action"], e.get("id"), float(e.get("duration", 0.0))))
        return cls(tuple(events))

    @classmethod
    def load(cls, path) -> ScenarioScript:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                return cls.from_dict(yaml.safe_load(fh))
            except (KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}: {e}") from None

    def dropped_intervals(self) -> dict[str, list[tuple[float, float]]]:
        """Per source id, the [start, end) intervals during which it is silenced."""
        out: dict[str, list[tuple[float, float]]] = {}
        open_at: dict[str, float] = {}
        for e in self.events:
            if e.action == "drop_source":
                open_at.setdefault(e.source_id, e.time)
            elif e.action == "restore_source" and e.source_id in open_at:
                out.setdefault(e.source_id, []).append((open_at.pop(e.source_id), e.time))
        for sid, t in open_at.items():
            out.setdefault(sid, []).append((t, float("inf")))
        return out

    def gaps(self) -> list[tuple[float, float]]:
        return [(e.time, e.time + e.duration) for e in self.events if e.action == "lidar_gap"]


def _inside(t: float, spans) -> bool:
    return any(a <= t < b for a, b in spans)


def apply_scenario(stream: Iterable, script: ScenarioScript) -> Iterator:
    """Drop events silenced by the script; survivors pass through untouched and in order."""
    dropped = script.dropped_intervals()
    gaps = script.gaps()
    for ev in stream:
        if _inside(ev.time, dropped.get(ev.source_id, ())):
            continue
        if ev.kind == "lidar" and _inside(ev.time, gaps):
            continue
        yield ev
