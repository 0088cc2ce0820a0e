from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import random_pose
from lidarodom.geometry import Pose, Rotation, StampedPose, relative, translate
from lidarodom.fusion import (
    SensorIntegrator,
    SourceBuffer,
    SourceKind,
    compute_prior,
    is_healthy,
    select_source,
)


def feed(src, t0, t1, rate, pose_fn=lambda t: translate(t, 0, 0)):
    for t in np.arange(t0, t1 + 1e-9, 1.0 / rate):
        src.ingest(StampedPose(float(t), pose_fn(float(t))))
    return src


def test_health_examples_strict_threshold():
    assert is_healthy(feed(SourceBuffer("a"), 0.0, 9.99, 10), 10.0)
    two = SourceBuffer("b")
    for t in (8.5, 9.5):
        two.ingest(StampedPose(t, Pose.identity()))
    assert not two.is_healthy(10.0)  # 2 in 2 s is exactly 1 Hz, not more
    three = SourceBuffer("c")
    for t in (8.5, 9.0, 9.5):
        three.ingest(StampedPose(t, Pose.identity()))
    assert three.is_healthy(10.0)
    assert not SourceBuffer("d").is_healthy(10.0)


def test_health_schedule_oracle():
    # 20 Hz until 3 s, silent until 6 s, then 0.5 Hz
    src = SourceBuffer("w")
    feed(src, 0.0, 3.0, 20)
    feed(src, 6.0, 12.0, 0.5)
    times, _, _ = src.snapshot()
    assert len(times) == 61 + 4
    for now in np.arange(0.5, 13.0, 0.25):
        n = np.sum((times >= now - 2.0) & (times <= now + 1e-12))
        assert src.is_healthy(now) == (n > 2), now


def test_late_and_duplicate_messages_are_dropped():
    src = SourceBuffer("a")
    assert src.ingest(StampedPose(1.0, Pose.identity()))
    assert src.ingest(StampedPose(0.995, Pose.identity()))  # within 10 ms
    assert not src.ingest(StampedPose(0.9, Pose.identity()))
    assert not src.ingest(StampedPose(1.0, Pose.identity()))
    assert src.dropped == 2 and len(src) == 2


def test_buffer_span_is_bounded():
    src = feed(SourceBuffer("a", span=5.0), 0.0, 20.0, 10)
    times, _, _ = src.snapshot()
    assert times[-1] - times[0] <= 5.0 + 1e-9
    with pytest.raises(ValueError):
        SourceBuffer("b", span=1.0, health_window=2.0)


def test_select_source_priority_and_fallthrough():
    wio = feed(SourceBuffer("wio", priority=0), 0, 5, 20)
    imu = feed(SourceBuffer("imu", SourceKind.ROTATION_ONLY, priority=1), 0, 10, 50)
    assert select_source([imu, wio], 5.0) == "wio"
    assert select_source([imu, wio], 9.0) == "imu"
    assert select_source([imu, wio], 14.0) is None
    with pytest.raises(ValueError):
        select_source([wio, SourceBuffer("x", priority=0)], 1.0)
    with pytest.raises(ValueError):
        SensorIntegrator([wio, SourceBuffer("x", priority=0)])


def test_prior_examples():
    src = feed(SourceBuffer("wio"), 0.0, 2.0, 20)
    res = compute_prior([src], 1.0, 1.1)
    assert res.source_id == "wio" and not res.degraded_to_identity
    assert res.transform.isclose(translate(0.1, 0, 0), 1e-9)
    assert compute_prior([src], 1.0, 1.1).transform == res.transform
    none = compute_prior([], 1.0, 1.1)
    assert none.degraded_to_identity and none.source_id is None and none.transform == Pose.identity()
    with pytest.raises(ValueError):
        compute_prior([src], 1.1, 1.0)


def test_prior_is_relative_of_interpolated_poses():
    rng = np.random.default_rng(0)
    keys = [random_pose(rng, 2.0, 0.5) for _ in range(41)]

    def pose_fn(t):
        return keys[int(round(t * 20))]

    src = feed(SourceBuffer("wio"), 0.0, 2.0, 20, pose_fn)
    res = compute_prior([src], 0.5, 0.55)
    assert res.transform.isclose(relative(keys[10], keys[11]), 1e-9)


def test_rotation_only_source_drops_translation():
    imu = feed(SourceBuffer("imu", SourceKind.ROTATION_ONLY),
               0.0, 2.0, 50, lambda t: Pose(Rotation.from_rpy(0, 0, t), (5 * t, 0, 0)))
    res = compute_prior([imu], 1.0, 1.1)
    assert np.array_equal(res.transform.translation, np.zeros(3))
    assert res.transform.rotation.isclose(Rotation.from_rpy(0, 0, 0.1), 1e-9)


def test_extrinsic_conjugation():
    ext = Pose.from_rpy(0.3, 0.1, 0.0, 0.0, 0.0, math.pi / 2)
    # sensor frame moves +x in its own frame; robot frame sees the rotated motion
    src = feed(SourceBuffer("vio", extrinsic=ext), 0.0, 2.0, 20)
    res = compute_prior([src], 1.0, 1.1)
    assert res.transform.isclose(ext @ translate(0.1, 0, 0) @ ext.inverse(), 1e-9)


def test_prior_falls_through_to_bracketing_source():
    wio = feed(SourceBuffer("wio", priority=0), 0.0, 1.05, 20)  # healthy but stops before t_curr
    imu = feed(SourceBuffer("imu", SourceKind.ROTATION_ONLY, priority=1), 0.0, 2.0, 50,
               lambda t: Pose(Rotation.from_rpy(0, 0, t)))
    res = SensorIntegrator([wio, imu]).compute_prior(1.0, 1.1, now=1.1)
    assert res.source_id == "imu"
    res = SensorIntegrator([wio, imu]).compute_prior(0.9, 1.0, now=1.0)
    assert res.source_id == "wio"


def test_no_extrapolation_beyond_hold():
    src = feed(SourceBuffer("wio"), 0.0, 1.0, 20)
    assert compute_prior([src], 0.9, 1.015).source_id == "wio"
    assert compute_prior([src], 0.9, 1.2, now=1.0).degraded_to_identity


def test_motion_provider():
    wio = feed(SourceBuffer("wio"), 0.0, 2.0, 20)
    ms = SensorIntegrator([wio]).motion_provider()(1.0, 1.1)
    assert ms is not None
    assert ms.pose_at(1.05).isclose(translate(1.05, 0, 0), 1e-9)
    assert SensorIntegrator([wio]).motion_provider()(5.0, 5.1) is None


def test_source_kind_parse():
    assert SourceKind.parse("WIO") is SourceKind.FULL_ODOMETRY
    assert SourceKind.parse("imu") is SourceKind.ROTATION_ONLY
    with pytest.raises(ValueError):
        SourceKind.parse("gps")
