"""Generalized-ICP (plane-to-plane) registration and the two matching stages."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .fusion import PriorResult
from .geometry import Pose
from .pointcloud import PointCloud, SpatialIndex, effective_workers


@dataclass(frozen=True)
class GicpConfig:
    scan_to_scan_iterations: int = 20
    scan_to_submap_iterations: int = 20
    correspondence_max_dist: float = 1.0
    translation_epsilon: float = 1e-4
    rotation_epsilon: float = 1e-4
    neighbors_k: int = 10
    workers: int = 4
    covariance_floor: float = 1e-3
    max_halvings: int = 8

    def validate(self) -> None:
        if self.scan_to_scan_iterations < 1 or self.scan_to_submap_iterations < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.neighbors_k < 3:
            raise ValueError(f"neighbors_k must be >= 3, got {self.neighbors_k}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if not 0 < self.covariance_floor <= 1:
            raise ValueError(f"covariance_floor must be in (0, 1], got {self.covariance_floor}")
        if not self.correspondence_max_dist > 0:
            raise ValueError("correspondence_max_dist must be positive")
        if self.translation_epsilon <= 0 or self.rotation_epsilon <= 0:
            raise ValueError("convergence epsilons must be positive")


@dataclass(eq=False)
class EnrichedCloud:
    """A cloud plus one regularized covariance per point."""

    cloud: PointCloud
    covariances: np.ndarray
    _index: SpatialIndex | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.cloud)

    @property
    def points(self) -> np.ndarray:
        return self.cloud.points

    @property
    def index(self) -> SpatialIndex:
        if self._index is None:
            self._index = SpatialIndex(self.cloud.points)
        return self._index

    def transformed(self, pose: Pose, frame: str | None = None) -> EnrichedCloud:
        """Points and covariances moved by a rigid transform (index dropped)."""
        r = pose.rotation.as_matrix()
        pts = pose.apply(self.cloud.points) if len(self) else self.cloud.points
        cov = np.einsum("ij,njk,lk->nil", r, self.covariances, r) if len(self) else self.covariances
        cloud = self.cloud.with_points(pts, frame=frame if frame is not None else self.cloud.frame)
        return EnrichedCloud(cloud, cov)


@dataclass(frozen=True)
class RegistrationResult:
    transform: Pose
    converged: bool
    iterations_used: int
    final_residual: float
    correspondence_fraction: float
    residual_history: tuple = ()
    skipped: bool = False


def enrich(c: PointCloud, cfg: GicpConfig, index: SpatialIndex | None = None) -> EnrichedCloud:
    """Plane-to-plane covariances from the k nearest neighbours of every point.

    The sample covariance is eigen-decomposed and its eigenvalues replaced
    by (floor, 1, 1) in ascending order.
    """
    k = cfg.neighbors_k
    if len(c) < k:
        raise ValueError(f"enrich needs at least neighbors_k={k} points, got {len(c)}")
    idx = index if index is not None else SpatialIndex(c.points)
    _, nbr = idx.tree.query(c.points, k=k, workers=effective_workers(cfg.workers))
    nbr = np.asarray(nbr, dtype=np.int64).reshape(len(c), k)
    cov = kernels.active().neighbor_covariances(c.points, nbr, cfg.covariance_floor, cfg.workers)
    return EnrichedCloud(c, cov, idx)


def identity_covariances(c: PointCloud) -> EnrichedCloud:
    """Identity covariances turn GICP into point-to-point ICP."""
    return EnrichedCloud(c, np.broadcast_to(np.eye(3), (len(c), 3, 3)).copy())


class _Problem:
    """Correspondences + GN terms for one source/target pair."""

    def __init__(self, source: EnrichedCloud, target: EnrichedCloud, cfg: GicpConfig):
        self.src = source.cloud.points
        self.src_cov = source.covariances
        self.tgt = target.cloud.points
        self.tgt_cov = target.covariances
        self.index = target.index
        self.cfg = cfg
        self.impl = kernels.active()

    def associate(self, pose: Pose):
        moved = pose.apply(self.src)
        idx, _ = self.index.nearest_one(moved, self.cfg.correspondence_max_dist, self.cfg.workers)
        ok = idx >= 0
        return np.nonzero(ok)[0], idx[ok]

    def mean_cost(self, pose: Pose, pairs) -> float:
        s, t = pairs
        if len(s) == 0:
            return math.inf
        c = self.impl.gicp_costs(
            self.src[s], self.src_cov[s], pose.rotation.as_matrix(), pose.translation,
            self.tgt[t], self.tgt_cov[t], self.cfg.workers,
        )
        return float(c.sum()) / len(s)

    def linearize(self, pose: Pose, pairs):
        s, t = pairs
        terms = self.impl.gicp_terms(
            self.src[s], self.src_cov[s], pose.rotation.as_matrix(), pose.translation,
            self.tgt[t], self.tgt_cov[t], self.cfg.workers,
        )
        return kernels.reduce_terms(terms)


def _small(step: np.ndarray, cfg: GicpConfig) -> bool:
    return bool(np.linalg.norm(step[:3]) < cfg.translation_epsilon and np.linalg.norm(step[3:]) < cfg.rotation_epsilon)


def gicp_align(
    source: EnrichedCloud,
    target: EnrichedCloud,
    guess: Pose,
    cfg: GicpConfig,
    max_iterations: int | None = None,
) -> RegistrationResult:
    """Find T minimizing sum d^T (C_t + R C_s R^T)^-1 d with d = t_i - T s_i.

    Damped Gauss-Newton on SE(3) (left perturbation), re-associating
    nearest neighbours after every accepted step. A step that raises the
    mean residual is halved up to ``cfg.max_halvings`` times, so accepted
    residuals never increase. Converged when an accepted step is below both
    epsilons.
    """
    max_iterations = cfg.scan_to_scan_iterations if max_iterations is None else max_iterations
    if len(source) == 0 or len(target) == 0:
        return RegistrationResult(guess, False, 0, math.inf, 0.0)
    prob = _Problem(source, target, cfg)
    pose = guess
    pairs = prob.associate(pose)
    if len(pairs[0]) == 0:
        return RegistrationResult(guess, False, 0, math.inf, 0.0)
    cost = prob.mean_cost(pose, pairs)
    history = [cost]
    converged = False
    iterations = 0
    while iterations < max_iterations:
        iterations += 1
        h, g, _ = prob.linearize(pose, pairs)
        try:
            delta = -np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            delta = -np.linalg.lstsq(h, g, rcond=None)[0]
        final = _small(delta, cfg)
        accepted = False
        step = delta
        # a sub-epsilon update is tried once without halving: it cannot move the estimate meaningfully
        for _ in range(1 if final else cfg.max_halvings + 1):
            cand = Pose.exp(step) @ pose
            cand_pairs = prob.associate(cand)
            if len(cand_pairs[0]):
                cand_cost = prob.mean_cost(cand, cand_pairs)
                if cand_cost <= cost:
                    accepted = True
                    break
            step = 0.5 * step
            if _small(step, cfg):
                break
        if not accepted:
            # no descent along the GN direction: converged if halving already shrank the
            # step below both epsilons (a stationary point at noise level), not otherwise
            converged = final or _small(step, cfg)
            break
        pose, pairs, cost = cand, cand_pairs, cand_cost
        history.append(cost)
        if _small(step, cfg):
            converged = True
            break
    return RegistrationResult(
        transform=pose,
        converged=converged,
        iterations_used=iterations,
        final_residual=cost,
        correspondence_fraction=len(pairs[0]) / len(source),
        residual_history=tuple(history),
    )


def scan_to_scan(curr: EnrichedCloud, prev: EnrichedCloud, prior: PriorResult, cfg: GicpConfig) -> RegistrationResult:
    """Align the current scan to the previous one, seeded by the prior (identity when degraded)."""
    guess = Pose.identity() if prior.degraded_to_identity else prior.transform
    return gicp_align(curr, prev, guess, cfg, cfg.scan_to_scan_iterations)


def scan_to_submap(
    curr: EnrichedCloud, submap: EnrichedCloud, seed: RegistrationResult | Pose, cfg: GicpConfig
) -> RegistrationResult:
    """Refine against the local submap starting from the scan-to-scan estimate.

    An empty submap returns the seed unchanged, flagged ``skipped``.
    """
    if isinstance(seed, Pose):
        seed = RegistrationResult(seed, False, 0, math.nan, 0.0)
    if len(submap) == 0:
        return RegistrationResult(
            seed.transform, seed.converged, seed.iterations_used, seed.final_residual,
            seed.correspondence_fraction, seed.residual_history, skipped=True,
        )
    return gicp_align(curr, submap, seed.transform, cfg, cfg.scan_to_submap_iterations)


def gicp_cost_and_gradient(source: EnrichedCloud, target: EnrichedCloud, pose: Pose, pairs, cfg: GicpConfig):
    """Total cost and GN gradient 2 J^T W d at ``pose`` for fixed correspondences.

    The covariance blend is taken at ``pose``; callers doing finite
    differences should hold it fixed the same way.
    """
    prob = _Problem(source, target, cfg)
    _, g, cost = prob.linearize(pose, pairs)
    return cost, 2.0 * g


def frozen_cost(source: EnrichedCloud, target: EnrichedCloud, pose: Pose, frozen_rotation: np.ndarray, pairs) -> float:
    """GICP cost with the combined covariance built from ``frozen_rotation`` instead of pose's."""
    s, t = pairs
    p = pose.apply(source.cloud.points[s])
    m = target.covariances[t] + np.einsum("ij,njk,lk->nil", frozen_rotation, source.covariances[s], frozen_rotation)
    d = target.cloud.points[t] - p
    x = np.linalg.solve(m, d[..., None])[..., 0]
    return float(np.einsum("ni,ni->", d, x))
