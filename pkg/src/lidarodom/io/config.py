"""Pipeline configuration: one YAML tree, unknown keys rejected, validated on load."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from ..fusion import SensorIntegrator, SourceBuffer, SourceKind
from ..geometry import Pose
from ..mapping import KeyframePolicy
from ..pipeline import FgaMode, Pipeline, PipelineParams
from ..preprocess import FilterConfig
from ..registration import GicpConfig

PROFILE_DIR = Path(__file__).resolve().parent.parent / "profiles"


class ConfigError(ValueError):
    pass


@dataclass
class PreprocessSection:
    voxel_enabled: bool = True
    voxel_leaf: float = 0.1
    random_enabled: bool = True
    keep_fraction: float = 0.1
    range_min: float = 0.5
    range_max: float = 100.0
    mdc_enabled: bool = True
    mdc_reference: str = "end"

    def validate(self) -> None:
        self.filters().validate()
        if self.mdc_reference not in ("end", "start"):
            raise ConfigError(f"preprocess.mdc_reference must be 'end' or 'start', got {self.mdc_reference!r}")

    def filters(self) -> FilterConfig:
        return FilterConfig(
            self.voxel_enabled, self.voxel_leaf, self.random_enabled, self.keep_fraction, self.range_min, self.range_max
        )


@dataclass
class SourceSection:
    id: str = ""
    kind: str = "odometry"
    priority: int | None = None
    extrinsic: list | None = None
    rate: float = 50.0

    def validate(self) -> None:
        if not self.id:
            raise ConfigError("fusion.sources entries need an id")
        SourceKind.parse(self.kind)
        if self.extrinsic is not None:
            Pose.from_array7(self.extrinsic)
        if not self.rate > 0:
            raise ConfigError(f"fusion source {self.id!r}: rate must be positive")


@dataclass
class FusionSection:
    health_window: float = 2.0
    min_rate: float = 1.0
    buffer_span: float = 15.0
    late_tolerance: float = 0.01
    bracket_tolerance: float = 0.02
    sources: list = field(default_factory=list)

    def validate(self) -> None:
        if not (self.health_window > 0 and self.min_rate > 0):
            raise ConfigError("fusion.health_window and fusion.min_rate must be positive")
        if self.buffer_span < self.health_window:
            raise ConfigError("fusion.buffer_span must cover the health window")
        if self.late_tolerance < 0 or self.bracket_tolerance < 0:
            raise ConfigError("fusion tolerances must be non-negative")
        for s in self.sources:
            s.validate()
        ids = [s.id for s in self.sources]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"fusion.sources has duplicate ids: {ids}")
        prios = [s.priority for s in self.sources if s.priority is not None]
        if len(set(prios)) != len(prios):
            raise ConfigError(f"fusion.sources has duplicate priorities: {prios}")


@dataclass
class RegistrationSection:
    scan_to_scan_iterations: int = 20
    scan_to_submap_iterations: int = 20
    correspondence_max_dist: float = 1.0
    translation_epsilon: float = 1e-4
    rotation_epsilon: float = 1e-4
    neighbors_k: int = 10
    workers: int = 4
    covariance_floor: float = 1e-3
    max_halvings: int = 8

    def gicp(self) -> GicpConfig:
        return GicpConfig(**dataclasses.asdict(self))

    def validate(self) -> None:
        self.gicp().validate()
        if self.max_halvings < 0:
            raise ConfigError("registration.max_halvings must be >= 0")


@dataclass
class MappingSection:
    resolution: float = 0.001
    keyframe_translation: float = 1.0
    keyframe_rotation_deg: float = 30.0
    submap_radius: float = 20.0
    submap_refresh_distance: float = 1.0

    def validate(self) -> None:
        if not self.resolution > 0:
            raise ConfigError("mapping.resolution must be positive")
        if not self.submap_radius > 0 or self.submap_refresh_distance < 0:
            raise ConfigError("mapping.submap_radius must be positive and refresh distance >= 0")
        KeyframePolicy(self.keyframe_translation, self.keyframe_rotation_deg)


@dataclass
class PipelineSection:
    lidars: int | None = None
    scan_period: float = 0.1
    fga_mode: str = "off"
    fga_window: float = 5.0
    fga_angle_tol_deg: float = 3.0
    gap_timeout: float = 0.5
    mode: str = "deterministic"
    seed: int = 0

    def validate(self) -> None:
        if self.lidars is not None and self.lidars < 1:
            raise ConfigError("pipeline.lidars must be >= 1")
        if not self.scan_period > 0:
            raise ConfigError("pipeline.scan_period must be positive")
        FgaMode(self.fga_mode)
        if not (self.fga_window > 0 and self.fga_angle_tol_deg > 0):
            raise ConfigError("pipeline.fga_window and fga_angle_tol_deg must be positive")
        if not self.gap_timeout > 0:
            raise ConfigError("pipeline.gap_timeout must be positive")
        if self.mode not in ("deterministic", "paced"):
            raise ConfigError(f"pipeline.mode must be deterministic or paced, got {self.mode!r}")


@dataclass
class EvalSection:
    assoc_tol: float = 0.05
    alignment: str = "se3"
    map_max_dist: float = 1.0

    def validate(self) -> None:
        if not self.assoc_tol > 0:
            raise ConfigError("eval.assoc_tol must be positive")
        if self.alignment not in ("se3", "none"):
            raise ConfigError(f"eval.alignment must be se3 or none, got {self.alignment!r}")
        if not self.map_max_dist > 0:
            raise ConfigError("eval.map_max_dist must be positive")


SECTIONS = {
    "preprocess": PreprocessSection,
    "fusion": FusionSection,
    "registration": RegistrationSection,
    "mapping": MappingSection,
    "pipeline": PipelineSection,
    "eval": EvalSection,
}


@dataclass
class PipelineConfig:
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    registration: RegistrationSection = field(default_factory=RegistrationSection)
    mapping: MappingSection = field(default_factory=MappingSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> PipelineConfig:
        for name in SECTIONS:
            try:
                getattr(self, name).validate()
            except ConfigError:
                raise
            except (ValueError, TypeError) as e:
                raise ConfigError(f"{name}: {e}") from None
        return self

    @classmethod
    def from_dict(cls, data: dict | None) -> PipelineConfig:
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kw = {name: _section(SECTIONS[name], data.get(name), name) for name in SECTIONS}
        return cls(**kw).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def override(self, **values: Any) -> PipelineConfig:
        """Copy with dotted-key overrides, e.g. ``override(**{"pipeline.seed": 3})``."""
        d = self.to_dict()
        for key, v in values.items():
            sec, _, name = key.partition(".")
            if sec not in d or name not in d[sec]:
                raise ConfigError(f"unknown config key {key!r}")
            d[sec][name] = v
        return PipelineConfig.from_dict(d)

    # -- runtime objects ------------------------------------------------------

    def params(self) -> PipelineParams:
        m = self.mapping
        p = self.pipeline
        return PipelineParams(
            filters=self.preprocess.filters(),
            gicp=self.registration.gicp(),
            keyframe=KeyframePolicy(m.keyframe_translation, m.keyframe_rotation_deg),
            map_resolution=m.resolution,
            submap_radius=m.submap_radius,
            submap_refresh_distance=m.submap_refresh_distance,
            scan_period=p.scan_period,
            mdc_enabled=self.preprocess.mdc_enabled,
            mdc_reference=self.preprocess.mdc_reference,
            fga_mode=FgaMode(p.fga_mode),
            fga_window=p.fga_window,
            fga_angle_tol=math.radians(p.fga_angle_tol_deg),
            gap_timeout=p.gap_timeout,
            seed=p.seed,
        )

    def integrator(self, declared=()) -> SensorIntegrator:
        """Source buffers from the config, falling back to dataset declarations (in order)."""
        f = self.fusion
        declared = {s.id: s for s in declared}
        entries = []
        if f.sources:
            for i, s in enumerate(f.sources):
                ext = Pose.from_array7(s.extrinsic) if s.extrinsic is not None else (
                    declared[s.id].extrinsic if s.id in declared else Pose.identity()
                )
                entries.append((s.id, SourceKind.parse(s.kind), s.priority if s.priority is not None else i, ext))
        else:
            entries = [(s.id, s.kind, i, s.extrinsic) for i, s in enumerate(declared.values())]
        buffers = [
            SourceBuffer(sid, kind, prio, ext, f.health_window, f.min_rate, f.buffer_span, f.late_tolerance)
            for sid, kind, prio, ext in entries
        ]
        return SensorIntegrator(buffers, f.bracket_tolerance)

    def build_pipeline(self, dataset) -> Pipeline:
        """A fresh pipeline wired to the dataset's lidars and pose streams."""
        n = len(dataset.lidars)
        if self.pipeline.lidars is not None and self.pipeline.lidars != n:
            raise ConfigError(f"config expects {self.pipeline.lidars} lidars, dataset declares {n}")
        if abs(dataset.scan_period - self.pipeline.scan_period) > 1e-12:
            raise ConfigError(
                f"dataset scan_period {dataset.scan_period} differs from pipeline.scan_period {self.pipeline.scan_period}"
            )
        return Pipeline(self.params(), self.integrator(dataset.sources), [l.extrinsic for l in dataset.lidars])


def _section(cls, data, name: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    kw = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if name == "fusion" and f.name == "sources":
            v = [_section(SourceSection, s, f"{name}.sources[{i}]") for i, s in enumerate(v or [])]
        elif isinstance(f.default, bool) and not isinstance(v, bool):
            raise ConfigError(f"{name}.{f.name} must be true or false, got {v!r}")
        elif isinstance(f.default, int) and not isinstance(f.default, bool) and not (isinstance(v, int) and not isinstance(v, bool)):
            raise ConfigError(f"{name}.{f.name} must be an integer, got {v!r}")
        elif isinstance(f.default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name}.{f.name} must be a number, got {v!r}")
            v = float(v)
        elif f.name == "fga_mode":
            # YAML 1.1 reads a bare off/on as a boolean
            v = {False: "off", True: "forced_on"}.get(v, v) if isinstance(v, bool) else str(v)
        elif f.name == "mode":
            v = str(v)
        kw[f.name] = v
    return cls(**kw)


def load_config(path=None) -> PipelineConfig:
    """Parse a YAML config; ``None`` gives the defaults."""
    if path is None:
        return PipelineConfig().validate()
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            where = f"{path}:{mark.line + 1}" if mark else str(path)
            raise ConfigError(f"{where}: invalid YAML") from None
    try:
        return PipelineConfig.from_dict(data)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None


def load_profile(name: str) -> PipelineConfig:
    """A shipped platform profile (default, husky, spot)."""
    p = PROFILE_DIR / f"{name}.yaml"
    if not p.is_file():
        avail = sorted(x.stem for x in PROFILE_DIR.glob("*.yaml"))
        raise ConfigError(f"no profile {name!r}; available: {avail}")
    return load_config(p)
