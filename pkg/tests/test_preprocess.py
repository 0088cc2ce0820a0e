from __future__ import annotations

import math

import numpy as np
import pytest

from lidarodom import kernels
from lidarodom.geometry import Pose, Rotation, relative, translate
from lidarodom.pointcloud import PointCloud
from lidarodom.preprocess import FilterConfig, MotionSamples, apply_filters, motion_correct


def linear_motion(v=1.0, yaw_rate=0.0, t0=-0.05, t1=0.2, n=26):
    times = np.linspace(t0, t1, n)
    poses = [Pose(Rotation.from_rpy(0, 0, yaw_rate * t), (v * t, 0.0, 0.0)) for t in times]
    return MotionSamples.from_poses(times, poses)


def test_mdc_constant_velocity_shift():
    # +x at 1 m/s; a point captured 0.05 s before scan end moves by -0.05 m in x
    c = PointCloud(0.0, "robot", [[1.0, 0.0, 0.0]], [0.05])
    out = motion_correct(c, linear_motion(), scan_period=0.1)
    np.testing.assert_allclose(out.points, [[0.95, 0.0, 0.0]], atol=1e-12)
    assert out.stamp == pytest.approx(0.1)
    assert out.meta["mdc"] == "applied" and out.meta["mdc_coverage"] == 1.0
    assert not out.has_timing


def test_mdc_end_point_unchanged_and_stationary_is_identity():
    c = PointCloud(0.0, "robot", [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], [0.1, 0.1])
    np.testing.assert_allclose(motion_correct(c, linear_motion()).points, c.points, atol=1e-12)
    still = linear_motion(v=0.0)
    c = PointCloud(0.0, "robot", np.random.default_rng(0).normal(size=(100, 3)), np.linspace(0, 0.1, 100))
    np.testing.assert_allclose(motion_correct(c, still).points, c.points, atol=1e-12)


def test_mdc_matches_formula_with_rotation():
    rng = np.random.default_rng(1)
    motion = linear_motion(v=2.0, yaw_rate=1.0)
    pts = rng.normal(size=(200, 3)) * 5
    offs = rng.uniform(0, 0.1, 200)
    out = motion_correct(PointCloud(0.0, "robot", pts, offs), motion)
    ref = motion.pose_at(0.1)
    for p, t, q in zip(pts, offs, out.points):
        np.testing.assert_allclose(relative(ref, motion.pose_at(t)).apply(p), q, atol=1e-9)


def test_mdc_without_timing_or_motion():
    c = PointCloud(0.0, "robot", [[1.0, 0.0, 0.0]])
    assert motion_correct(c, linear_motion()).meta["mdc"] == "skipped"
    timed = PointCloud(0.0, "robot", [[1.0, 0.0, 0.0]], [0.05])
    out = motion_correct(timed, None)
    assert out.meta["mdc"] == "uncorrected"
    np.testing.assert_array_equal(out.points, timed.points)
    assert motion_correct(timed, lambda a, b: None).meta["mdc"] == "uncorrected"


def test_mdc_with_extrinsic_stays_in_sensor_frame():
    ext = Pose.from_rpy(0.5, 0.0, 0.3, 0.0, 0.0, math.pi / 2)
    c = PointCloud(0.0, "lidar0", [[1.0, 0.0, 0.0]], [0.05])
    out = motion_correct(c, linear_motion(), extrinsic=ext)
    expected = ext.inverse().apply(ext.apply([1.0, 0.0, 0.0]) - [0.05, 0.0, 0.0])
    np.testing.assert_allclose(out.points[0], expected, atol=1e-12)


def test_partial_coverage_leaves_points():
    motion = linear_motion(t0=0.0, t1=0.05, n=6)
    c = PointCloud(0.0, "robot", [[1.0, 0, 0], [1.0, 0, 0]], [0.01, 0.09])
    out = motion_correct(c, motion)
    assert out.meta["mdc"] == "uncorrected"  # reference time outside the samples
    hold = MotionSamples(motion.times, motion.quats, motion.trans, hold_tolerance=0.06)
    out = motion_correct(c, hold)
    assert out.meta["mdc_coverage"] == 1.0


@pytest.mark.skipif(kernels.numba_impl is None, reason="numba unavailable")
def test_deskew_backends_agree():
    rng = np.random.default_rng(2)
    m = linear_motion(v=1.5, yaw_rate=0.7)
    pts = rng.normal(size=(3000, 3)) * 10
    t = rng.uniform(-0.1, 0.3, 3000)
    ref = m.pose_at(0.1)
    args = (pts, t, m.times, m.quats, m.trans, ref.rotation.wxyz, ref.translation, 0.02, 1)
    a, va = kernels.numpy_impl.deskew(*args)
    b, vb = kernels.numba_impl.deskew(*args)
    assert np.array_equal(va, vb) and 0 < va.mean() < 1
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(a[~va], pts[~va])


def test_filter_chain_order_and_validation():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-20, 20, size=(20000, 3))
    c = PointCloud(0.0, "robot", pts)
    cfg = FilterConfig(voxel_leaf=1.0, keep_fraction=0.5, range_min=1.0, range_max=15.0)
    out = apply_filters(c, cfg, seed=7)
    r = np.linalg.norm(out.points, axis=1)
    assert r.min() >= 0.5  # centroids of voxels that were inside the range
    assert len(out) == round(0.5 * len(apply_filters(c, FilterConfig(voxel_leaf=1.0, random_enabled=False, range_min=1.0, range_max=15.0))))
    assert np.array_equal(out.points, apply_filters(c, cfg, seed=7).points)
    off = FilterConfig(voxel_enabled=False, random_enabled=False, range_min=0.0, range_max=1e9)
    assert np.array_equal(apply_filters(c, off).points, pts)
    for bad in (FilterConfig(voxel_leaf=0.0), FilterConfig(keep_fraction=0.0), FilterConfig(range_min=5, range_max=1)):
        with pytest.raises(ValueError):
            bad.validate()
