from __future__ import annotations

import math

import pytest

from lidarodom.fusion import SourceKind
from lidarodom.geometry import Pose
from lidarodom.io.config import ConfigError, PipelineConfig, load_config, load_profile
from lidarodom.pipeline import FgaMode


def write(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    return p


def test_defaults():
    cfg = load_config(None)
    p = cfg.params()
    assert p.filters.voxel_leaf == 0.1 and p.filters.keep_fraction == 0.1
    assert p.gicp.scan_to_submap_iterations == 20 and p.gicp.scan_to_scan_iterations == 20
    assert p.keyframe.translation_threshold == 1.0 and p.keyframe.rotation_threshold == 30.0
    assert p.fga_mode == FgaMode.OFF and p.gap_timeout == 0.5
    assert p.fga_angle_tol == pytest.approx(math.radians(3.0))


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown config sections"):
        load_config(write(tmp_path, "bogus: {}\n"))
    with pytest.raises(ConfigError, match="unknown keys in registration"):
        load_config(write(tmp_path, "registration:\n  max_iter: 5\n"))
    with pytest.raises(ConfigError, match="unknown keys"):
        load_config(write(tmp_path, "fusion:\n  sources:\n    - {id: a, colour: red}\n"))


def test_bad_values_are_rejected(tmp_path):
    for text in (
        "preprocess:\n  voxel_leaf: 0\n",
        "preprocess:\n  keep_fraction: 1.5\n",
        "registration:\n  workers: 0\n",
        "registration:\n  workers: 2.5\n",
        "preprocess:\n  voxel_enabled: maybe\n",
        "pipeline:\n  fga_mode: sometimes\n",
        "pipeline:\n  mode: fast\n",
        "mapping:\n  keyframe_translation: 0\n",
        "fusion:\n  sources:\n    - {id: a, kind: gps}\n",
        "fusion:\n  sources:\n    - {id: a, priority: 0}\n    - {id: b, priority: 0}\n",
        "eval:\n  alignment: sim3\n",
        "registration: [1, 2]\n",
        "- 1\n",
    ):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, text))


def test_invalid_yaml_names_the_line(tmp_path):
    with pytest.raises(ConfigError, match=r"c\.yaml:\d+: invalid YAML"):
        load_config(write(tmp_path, "pipeline:\n  seed: [1,\n"))


def test_yaml_off_is_not_a_boolean(tmp_path):
    assert load_config(write(tmp_path, "pipeline:\n  fga_mode: off\n")).pipeline.fga_mode == "off"


def test_override_and_dump_round_trip(tmp_path):
    cfg = load_config(None).override(**{"pipeline.seed": 7, "preprocess.voxel_leaf": 0.2})
    assert cfg.pipeline.seed == 7 and cfg.preprocess.voxel_leaf == 0.2
    again = load_config(write(tmp_path, cfg.dump()))
    assert again == cfg
    with pytest.raises(ConfigError):
        cfg.override(**{"pipeline.nope": 1})


def test_profiles():
    husky = load_profile("husky")
    assert husky.pipeline.lidars == 2 and husky.preprocess.voxel_leaf == 0.1
    assert husky.registration.scan_to_submap_iterations == 20 and husky.registration.workers == 4
    assert [s.id for s in husky.fusion.sources] == ["wio", "imu"]
    load_profile("default")
    load_profile("spot")
    with pytest.raises(ConfigError, match="available"):
        load_profile("tank")


def test_integrator_sources_and_fallback():
    class Declared:
        def __init__(self, id, kind, ext):
            self.id, self.kind, self.extrinsic = id, kind, ext

    ext = Pose.from_array7([0.1, 0, 0, 0, 0, 0, 1])
    declared = [Declared("vio", SourceKind.FULL_ODOMETRY, ext), Declared("imu", SourceKind.ROTATION_ONLY, Pose.identity())]
    fused = PipelineConfig().validate().integrator(declared)
    assert [s.id for s in fused.by_priority()] == ["vio", "imu"]
    assert fused.sources["vio"].extrinsic == ext
    husky = load_profile("husky").integrator(declared)
    assert [s.id for s in husky.by_priority()] == ["wio", "imu"]
    assert husky.sources["imu"].rotation_only
