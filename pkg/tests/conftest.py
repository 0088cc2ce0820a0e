"""Shared fixtures and hypothesis strategies."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from lidarodom.geometry import Pose, Rotation, StampedPose

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

finite = st.floats(-50.0, 50.0, allow_nan=False, allow_infinity=False)


@st.composite
def rotations(draw):
    q = np.array([draw(st.floats(-1, 1)) for _ in range(4)])
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    return Rotation(q)


@st.composite
def poses(draw):
    return Pose(draw(rotations()), [draw(finite) for _ in range(3)])


def random_pose(rng: np.random.Generator, t_scale: float = 1.0, r_scale: float = math.pi) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Pose(Rotation.from_rotvec(axis * rng.uniform(0, r_scale)), rng.normal(scale=t_scale, size=3))


@pytest.fixture(scope="session")
def corridor50():
    """The 50-scan corridor: 0.1 m/step, range noise 0.01 m, exact 50 Hz WIO and IMU."""
    from lidarodom.io.synthetic import corridor_run

    return corridor_run(50, step=0.1, noise_sigma=0.01, seed=1)


@pytest.fixture(scope="session")
def room_scan():
    """One noiseless scan from the middle of a furnished room (>= 5k points)."""
    from lidarodom.io.synthetic import LidarSpec, Trajectory, room_world, scan_world

    world = room_world()
    traj = Trajectory.straight((0.0, 0.0, 0.0), 1.0)
    lidar = LidarSpec(noise_sigma=0.0, per_point_timing=False)
    return scan_world(world, traj, lidar, 0.0, Pose.identity(), np.random.default_rng(0))


def run_pipeline(run, cfg=None, mode="deterministic", script=None, **overrides):
    """Replay a synthetic run through a fresh pipeline; returns (pipeline, RunResult)."""
    from lidarodom.io.config import PipelineConfig
    from lidarodom.io.scenario import apply_scenario
    from lidarodom.pipeline import Pipeline, replay

    cfg = cfg or PipelineConfig().validate()
    if overrides:
        cfg = cfg.override(**{k.replace("__", "."): v for k, v in overrides.items()})
    pipe = Pipeline(cfg.params(), cfg.integrator(run.sources), run.lidar_extrinsics)
    events = run.events() if script is None else apply_scenario(run.events(), script)
    return pipe, replay(events, pipe, run.lidar_ids, mode)


def ape_of(result, run):
    from lidarodom.evaluation import Trajectory, ape

    est = Trajectory.from_poses(StampedPose(o.stamp, o.pose) for o in result.outputs)
    return ape(est, Trajectory.from_poses(run.gt), 0.05, "se3")


# acceptance verdicts, echoed again in the terminal summary
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
