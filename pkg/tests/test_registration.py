from __future__ import annotations

import math

import numpy as np
import pytest

from lidarodom import kernels
from lidarodom.fusion import PriorResult
from lidarodom.geometry import Pose, Rotation, translate
from lidarodom.pointcloud import PointCloud, transform_cloud
from lidarodom.registration import (
    EnrichedCloud,
    GicpConfig,
    enrich,
    frozen_cost,
    gicp_align,
    gicp_cost_and_gradient,
    identity_covariances,
    scan_to_scan,
    scan_to_submap,
)

CFG = GicpConfig(workers=1)


def plane_cloud(n=400, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(-5, 5, n), rng.uniform(-5, 5, n), rng.normal(0, noise, n) if noise else np.zeros(n)])
    return PointCloud(0.0, "robot", pts)


def box_cloud(seed=0, n=3000):
    # three orthogonal noisy planes: a fully constrained structure
    rng = np.random.default_rng(seed)
    k = n // 3
    a = np.column_stack([rng.uniform(0, 6, k), rng.uniform(0, 6, k), rng.normal(0, 0.002, k)])
    b = np.column_stack([rng.uniform(0, 6, k), rng.normal(0, 0.002, k), rng.uniform(0, 6, k)])
    c = np.column_stack([rng.normal(0, 0.002, k), rng.uniform(0, 6, k), rng.uniform(0, 6, k)])
    return PointCloud(0.0, "robot", np.vstack([a, b, c]))


def test_enrich_plane_covariances():
    ec = enrich(plane_cloud(), CFG)
    for c in ec.covariances[:50]:
        w, v = np.linalg.eigh(c)
        np.testing.assert_allclose(w, [1e-3, 1.0, 1.0], atol=1e-9)
        assert abs(abs(v[2, 0]) - 1.0) < 1e-9  # smallest along the normal (z)
    with pytest.raises(ValueError):
        enrich(PointCloud(0.0, "robot", np.zeros((5, 3))), CFG)


def test_covariances_are_spd_and_match_eigh():
    rng = np.random.default_rng(1)
    c = PointCloud(0.0, "robot", rng.normal(size=(2000, 3)) * [5, 3, 1])
    ec = enrich(c, CFG)
    _, nbr = ec.index.tree.query(c.points, k=10)
    for i in range(0, 2000, 97):
        x = c.points[nbr[i]]
        s = np.cov(x.T, bias=True)
        _, v = np.linalg.eigh(s)
        ref = v @ np.diag([1e-3, 1.0, 1.0]) @ v.T
        np.testing.assert_allclose(ec.covariances[i], ref, atol=1e-10)
        assert np.all(np.linalg.eigvalsh(ec.covariances[i]) > 0)


@pytest.mark.skipif(kernels.numba_impl is None, reason="numba unavailable")
def test_kernel_backends_agree():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(1500, 3)) * 4
    nbr = np.argsort(rng.uniform(size=(1500, 1500)), axis=1)[:, :10].astype(np.int64)
    a = kernels.numpy_impl.neighbor_covariances(pts, nbr, 1e-3, 1)
    b = kernels.numba_impl.neighbor_covariances(pts, nbr, 1e-3, 1)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    r = Rotation.from_rpy(0.1, -0.2, 0.3).as_matrix()
    t = np.array([0.3, -0.1, 0.2])
    tgt = pts + rng.normal(scale=0.05, size=pts.shape)
    for name in ("gicp_terms", "gicp_costs"):
        x = getattr(kernels.numpy_impl, name)(pts, a, r, t, tgt, a, 1)
        y = getattr(kernels.numba_impl, name)(pts, a, r, t, tgt, a, 1)
        np.testing.assert_allclose(x, y, rtol=1e-11, atol=1e-9)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    src = enrich(box_cloud(3, 900), CFG)
    tgt = enrich(transform_cloud(box_cloud(4, 900), Pose.from_rpy(0.05, -0.02, 0.03, 0.01, 0.02, -0.03)), CFG)
    pose = Pose.from_rpy(0.02, 0.01, -0.01, 0.005, -0.01, 0.02)
    idx, _ = tgt.index.nearest_one(pose.apply(src.points), 1.0)
    pairs = (np.nonzero(idx >= 0)[0], idx[idx >= 0])
    cost, grad = gicp_cost_and_gradient(src, tgt, pose, pairs, CFG)
    r0 = pose.rotation.as_matrix()
    assert cost == pytest.approx(frozen_cost(src, tgt, pose, r0, pairs), rel=1e-10)
    eps = 1e-6
    fd = np.zeros(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = eps
        fd[i] = (frozen_cost(src, tgt, Pose.exp(e) @ pose, r0, pairs)
                 - frozen_cost(src, tgt, Pose.exp(-e) @ pose, r0, pairs)) / (2 * eps)
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-5 * np.abs(fd).max())


def test_room_recovers_known_transform(room_scan):
    assert len(room_scan) >= 5000
    truth = Pose.from_rpy(0.3, -0.2, 0.05, 0.0, 0.0, math.radians(5))
    tgt = enrich(room_scan, CFG)
    src = enrich(transform_cloud(room_scan, truth.inverse()), CFG)
    res = gicp_align(src, tgt, Pose.identity(), CFG)
    assert res.converged
    err = truth.inverse() @ res.transform
    assert np.linalg.norm(err.translation) < 1e-3
    assert math.degrees(err.rotation.angle()) < 0.05
    assert all(b <= a for a, b in zip(res.residual_history, res.residual_history[1:]))
    assert res.correspondence_fraction > 0.9


def test_identity_input_converges_immediately():
    c = enrich(box_cloud(), CFG)
    res = gicp_align(c, c, Pose.identity(), CFG)
    assert res.converged and res.iterations_used == 1
    assert res.transform.isclose(Pose.identity(), 1e-6)
    assert res.final_residual == pytest.approx(0.0, abs=1e-12)


def test_point_to_point_mode():
    c = box_cloud(5)
    truth = translate(0.05, -0.03, 0.02)
    res = gicp_align(identity_covariances(transform_cloud(c, truth.inverse())), identity_covariances(c), Pose.identity(), CFG)
    assert res.transform.isclose(truth, 1e-3)


def test_residual_history_never_increases_with_noise():
    rng = np.random.default_rng(6)
    for trial in range(5):
        c = box_cloud(trial)
        noisy = PointCloud(0.0, "robot", c.points + rng.normal(scale=0.01, size=c.points.shape))
        truth = Pose.from_rpy(*(rng.normal(scale=0.1, size=3)), *(rng.normal(scale=0.03, size=3)))
        res = gicp_align(enrich(transform_cloud(noisy, truth.inverse()), CFG), enrich(c, CFG), Pose.identity(), CFG)
        h = res.residual_history
        assert all(b <= a for a, b in zip(h, h[1:]))
        assert res.iterations_used <= CFG.scan_to_scan_iterations


def test_iteration_cap_respected():
    c = enrich(box_cloud(), CFG)
    res = gicp_align(c, c, translate(0.2, 0.1, 0.0), CFG, max_iterations=1)
    assert res.iterations_used == 1


def test_empty_inputs_and_stages():
    c = enrich(box_cloud(), CFG)
    empty = EnrichedCloud(PointCloud.empty(), np.empty((0, 3, 3)))
    res = gicp_align(empty, c, Pose.identity(), CFG)
    assert not res.converged and res.iterations_used == 0
    far = gicp_align(c, enrich(transform_cloud(box_cloud(), translate(100, 0, 0)), CFG), Pose.identity(), CFG)
    assert far.correspondence_fraction == 0.0 and not far.converged
    seed = translate(0.1, 0, 0)
    sk = scan_to_submap(c, empty, seed, CFG)
    assert sk.skipped and sk.transform == seed


def test_scan_to_scan_uses_prior_unless_degraded():
    c = box_cloud(7)
    truth = translate(0.3, 0.0, 0.0)
    src = enrich(transform_cloud(c, truth.inverse()), CFG)
    tgt = enrich(c, CFG)
    good = scan_to_scan(src, tgt, PriorResult(truth, "wio", False), CFG)
    assert good.converged and good.iterations_used <= 2
    bogus = PriorResult(translate(50, 0, 0), None, True)
    assert scan_to_scan(src, tgt, bogus, CFG).correspondence_fraction > 0.5


def test_config_validation():
    for bad in (GicpConfig(neighbors_k=2), GicpConfig(workers=0), GicpConfig(covariance_floor=0.0),
                GicpConfig(scan_to_scan_iterations=0), GicpConfig(correspondence_max_dist=0.0)):
        with pytest.raises(ValueError):
            bad.validate()
