from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import ape_of, run_pipeline
from lidarodom.evaluation import simulate_drops
from lidarodom.geometry import Pose, Rotation, StampedPose
from lidarodom.io.scenario import ScenarioEvent, ScenarioScript
from lidarodom.pipeline import (
    DropAccounting,
    FgaMode,
    FgaMonitor,
    Pipeline,
    PipelineParams,
    apply_fga,
    drop_policy,
    fga_auto_monitor,
    replay,
)


def test_apply_fga_zeros_z_roll_pitch():
    p = Pose.from_rpy(1.0, 2.0, 3.0, 0.1, -0.2, 0.7)
    f = apply_fga(p)
    r, pi, y = f.rotation.to_rpy()
    assert f.translation[2] == 0.0 and r == 0.0 and pi == 0.0
    assert y == pytest.approx(0.7, abs=1e-12)
    np.testing.assert_array_equal(f.translation[:2], p.translation[:2])
    assert apply_fga(f) == f


def test_fga_monitor_schedule():
    level = Rotation.identity()
    tilted = Rotation.from_rpy(math.radians(4.0), 0.0, 0.0)
    stream = [(round(0.1 * k, 9), level) for k in range(60)]
    stream += [(6.0, tilted)] + [(round(0.1 * k, 9), level) for k in range(61, 120)]
    ev = fga_auto_monitor(stream, 5.0, math.radians(3.0))
    assert [e[1] for e in ev] == ["activate", "deactivate", "activate"]
    assert ev[0][0] == pytest.approx(5.0)
    assert ev[1][0] == 6.0
    assert ev[2][0] == pytest.approx(11.1)
    m = FgaMonitor(5.0, math.radians(3.0))
    assert not m.update(0.0, Rotation.from_rpy(0, math.radians(3.0), 0))


def test_drop_policy_examples():
    assert drop_policy(True) == "dropped" and drop_policy(False) == "processed"
    # 1.5x the scan period: every other scan is dropped
    assert simulate_drops([0.15] * 50, 0.1) == (50, 49)
    # 0.2 s at 10 Hz: one drop per processed scan (arrival at busy_until is free)
    assert simulate_drops([0.2] * 50, 0.1) == (50, 49)
    assert simulate_drops([0.25] * 20, 0.1) == (20, 38)
    assert simulate_drops([0.05] * 30, 0.1) == (30, 0)


def test_drop_accounting_rate():
    acc = DropAccounting()
    for k in range(10):
        t = 0.1 * k
        if acc.offer(t):
            acc.finish(t, 0.15)
    assert (acc.processed, acc.dropped) == (5, 5)
    assert acc.drops_per_second(0.1) == pytest.approx(5.0)


def test_short_corridor_tracks_ground_truth(corridor50):
    pipe, res = run_pipeline(corridor50)
    assert len(res.outputs) == 50
    stamps = [o.stamp for o in res.outputs]
    assert all(b > a for a, b in zip(stamps, stamps[1:]))
    assert res.outputs[0].pose == Pose.identity()
    assert ape_of(res, corridor50).mean < 0.05
    assert pipe.prior_histogram["wio"] == 49
    assert len(pipe.map) > 0 and pipe.scans_processed == 50
    assert all(o.scan_to_scan_converged for o in res.outputs[1:])


def test_replay_is_deterministic(corridor50):
    run = corridor50
    _, a = run_pipeline(run)
    _, b = run_pipeline(run)
    assert [o.pose for o in a.outputs[:15]] == [o.pose for o in b.outputs[:15]]


def test_lidar_gap_propagates_and_recovers(corridor50):
    # scans 20-29 complete at 2.1 s .. 3.0 s
    script = ScenarioScript((ScenarioEvent(2.05, "lidar_gap", duration=1.0),))
    pipe, res = run_pipeline(corridor50, script=script)
    scans = [o for o in res.outputs if not o.propagated]
    props = [o for o in res.outputs if o.propagated]
    assert len(scans) == 40 and props
    assert all(o.prior_source == "wio" for o in props)
    stamps = np.array([o.stamp for o in res.outputs])
    assert np.diff(stamps).max() <= 0.5 + 1e-9
    assert ape_of(res, corridor50).mean < 0.15


def test_sources_dropping_degrade_gracefully(corridor50):
    script = ScenarioScript((ScenarioEvent(1.0, "drop_source", "wio"), ScenarioEvent(1.0, "drop_source", "imu")))
    pipe, res = run_pipeline(corridor50, script=script)
    assert len(res.outputs) == 50
    assert pipe.prior_histogram["identity"] > 0
    assert ape_of(res, corridor50).mean < 0.15


def test_forced_fga_outputs_are_planar(corridor50):
    _, res = run_pipeline(corridor50, pipeline__fga_mode="forced_on")
    for o in res.outputs:
        r, p, _ = o.pose.rotation.to_rpy()
        assert o.pose.translation[2] == 0.0 and r == 0.0 and p == 0.0


def test_paced_mode_accounts_drops(corridor50):
    fake = iter(np.arange(0.0, 1000.0, 0.15))
    pipe = Pipeline(PipelineParams(), None, corridor50.lidar_extrinsics)
    events = [e for e in corridor50.events() if e.kind == "lidar"][:10]
    clock_ticks = []

    def clock():
        # each call pair measures 0.15 s of work
        t = next(fake)
        clock_ticks.append(t)
        return t

    res = replay(events, pipe, corridor50.lidar_ids, "paced", clock=clock)
    assert len(res.outputs) == 5 and len(res.dropped) == 5
    assert res.drops_per_second(0.1) == pytest.approx(5.0)


def test_replay_rejects_unknown_mode(corridor50):
    with pytest.raises(ValueError):
        replay([], Pipeline(), corridor50.lidar_ids, "fast")


def test_process_scan_validation(corridor50):
    pipe = Pipeline(PipelineParams(), None, corridor50.lidar_extrinsics)
    with pytest.raises(ValueError):
        pipe.process_scan([])
    c = corridor50.scans["lidar0"][5]
    pipe.process_scan([c])
    with pytest.raises(ValueError):
        pipe.process_scan([corridor50.scans["lidar0"][3]])


def test_two_lidars_are_merged():
    from lidarodom.io.synthetic import LidarSpec, SourceSpec, Trajectory, corridor_world, generate_synthetic

    world = corridor_world(length=40.0)
    traj = Trajectory.straight((1.0, 0.0, 0.0), 2.2)
    exts = [Pose.from_rpy(0.3, 0.2, 0.2, 0, 0, 0.3), Pose.from_rpy(-0.3, -0.2, 0.2, 0, 0, math.pi - 0.3)]
    run = generate_synthetic(world, traj, LidarSpec(azimuth_steps=450), 15, seed=3,
                             sources=(SourceSpec("wio"),), lidar_extrinsics=exts)
    pipe, res = run_pipeline(run)
    assert len(res.outputs) == 15
    assert res.outputs[1].points > 0
    assert ape_of(res, run).mean < 0.05
