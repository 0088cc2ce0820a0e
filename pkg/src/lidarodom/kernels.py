"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``LIDARODOM_DISABLE_NUMBA`` is unset (or "0"). Both paths are
always importable as ``numpy_impl`` / ``numba_impl`` so tests and the
benchmark can compare them directly.

Every kernel is per-point independent. Reductions over points are done
afterwards in a fixed serial order, so results do not depend on the
worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from types import SimpleNamespace

import numpy as np

CHUNK = 4096
_CPUS = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ and "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
        # skip the TBB probe; it warns on older TBB installs
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _numba_disabled_by_env() -> bool:
    return os.environ.get("LIDARODOM_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = HAVE_NUMBA and not _numba_disabled_by_env()
BACKEND = "numba" if USE_NUMBA else "numpy"


def _chunks(n: int):
    return [(s, min(n, s + CHUNK)) for s in range(0, n, CHUNK)]


def _map_chunks(fn, n: int, workers: int):
    """Run fn(start, stop) over fixed chunks; output order is chunk order."""
    spans = _chunks(n)
    workers = min(workers, _CPUS)
    if workers <= 1 or len(spans) <= 1:
        return [fn(a, b) for a, b in spans]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), spans))


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


JACOBI_SWEEPS = 8
_PAIRS = ((0, 1), (0, 2), (1, 2))


def _np_jacobi_rotation(apq, app, aqq):
    """(cos, sin) zeroing a_pq; identity where a_pq is already zero."""
    nz = apq != 0.0
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        return _np_jacobi_rotation_inner(apq, app, aqq, nz)


def _np_jacobi_rotation_inner(apq, app, aqq, nz):
    theta = (aqq - app) / (2.0 * np.where(nz, apq, 1.0))
    big = np.abs(theta) > 1e150
    sgn = np.where(theta >= 0.0, 1.0, -1.0)
    t = np.where(big, 0.5 / np.where(big, theta, 1.0), sgn / (np.abs(theta) + np.sqrt(theta * theta + 1.0)))
    t = np.where(nz, t, 0.0)
    c = 1.0 / np.sqrt(t * t + 1.0)
    return c, t * c


def _np_regularize(cov: np.ndarray, floor: float) -> np.ndarray:
    """Replace eigenvalues by (floor, 1, 1): I - (1 - floor) v v^T with v the smallest eigenvector.

    Cyclic Jacobi with a fixed sweep count, mirrored operation for
    operation by the numba kernel.
    """
    a = cov.copy()
    v = np.broadcast_to(np.eye(3), cov.shape).copy()
    for _ in range(JACOBI_SWEEPS):
        for p, q in _PAIRS:
            c, sn = _np_jacobi_rotation(a[:, p, q], a[:, p, p], a[:, q, q])
            c = c[:, None]
            sn = sn[:, None]
            ap = a[:, :, p].copy()
            aq = a[:, :, q].copy()
            a[:, :, p] = c * ap - sn * aq
            a[:, :, q] = sn * ap + c * aq
            ap = a[:, p, :].copy()
            aq = a[:, q, :].copy()
            a[:, p, :] = c * ap - sn * aq
            a[:, q, :] = sn * ap + c * aq
            vp = v[:, :, p].copy()
            vq = v[:, :, q].copy()
            v[:, :, p] = c * vp - sn * vq
            v[:, :, q] = sn * vp + c * vq
    lam = np.stack([a[:, 0, 0], a[:, 1, 1], a[:, 2, 2]], axis=1)
    pick = np.argmin(lam, axis=1)
    n0 = np.take_along_axis(v, pick[:, None, None].repeat(3, axis=1), axis=2)[:, :, 0]
    out = -(1.0 - floor) * n0[:, :, None] * n0[:, None, :]
    out[:, 0, 0] += 1.0
    out[:, 1, 1] += 1.0
    out[:, 2, 2] += 1.0
    return out


def np_neighbor_covariances(points: np.ndarray, nbr_idx: np.ndarray, floor: float, workers: int = 1) -> np.ndarray:
    n = len(points)
    out = np.empty((n, 3, 3))
    if n == 0:
        return out

    def work(a, b):
        nb = points[nbr_idx[a:b]]
        mean = nb.mean(axis=1, keepdims=True)
        d = nb - mean
        cov = np.einsum("nki,nkj->nij", d, d) / nbr_idx.shape[1]
        out[a:b] = _np_regularize(cov, floor)

    _map_chunks(work, n, workers)
    return out


def _skew_batch(p: np.ndarray) -> np.ndarray:
    s = np.zeros(p.shape[:-1] + (3, 3))
    s[..., 0, 1] = -p[..., 2]
    s[..., 0, 2] = p[..., 1]
    s[..., 1, 0] = p[..., 2]
    s[..., 1, 2] = -p[..., 0]
    s[..., 2, 0] = -p[..., 1]
    s[..., 2, 1] = p[..., 0]
    return s


_TRIU = np.triu_indices(6)


def np_gicp_terms(src, src_cov, rot, trans, tgt, tgt_cov, workers: int = 1) -> np.ndarray:
    """Per-correspondence Gauss-Newton terms.

    Returns (N, 28): 21 upper-triangle entries of J^T W J, 6 entries of
    J^T W d, then the Mahalanobis cost d^T W d, with d = tgt - (R src + t),
    W = (C_tgt + R C_src R^T)^-1 and J = [-I, [R src + t]x].
    """
    n = len(src)
    out = np.empty((n, 28))

    def work(a, b):
        p = src[a:b] @ rot.T + trans
        m = tgt_cov[a:b] + np.einsum("ij,njk,lk->nil", rot, src_cov[a:b], rot)
        w = np.linalg.inv(m)
        d = tgt[a:b] - p
        px = _skew_batch(p)
        wp = w @ px
        h = np.empty((b - a, 6, 6))
        h[:, :3, :3] = w
        h[:, :3, 3:] = -wp
        h[:, 3:, :3] = -np.transpose(wp, (0, 2, 1))
        h[:, 3:, 3:] = np.transpose(px, (0, 2, 1)) @ wp
        wd = np.einsum("nij,nj->ni", w, d)
        out[a:b, :21] = h[:, _TRIU[0], _TRIU[1]]
        out[a:b, 21:24] = -wd
        out[a:b, 24:27] = np.einsum("nji,nj->ni", px, wd)
        out[a:b, 27] = np.einsum("ni,ni->n", d, wd)

    _map_chunks(work, n, workers)
    return out


def np_gicp_costs(src, src_cov, rot, trans, tgt, tgt_cov, workers: int = 1) -> np.ndarray:
    n = len(src)
    out = np.empty(n)

    def work(a, b):
        p = src[a:b] @ rot.T + trans
        m = tgt_cov[a:b] + np.einsum("ij,njk,lk->nil", rot, src_cov[a:b], rot)
        d = tgt[a:b] - p
        x = np.linalg.solve(m, d[..., None])[..., 0]
        out[a:b] = np.einsum("ni,ni->n", d, x)

    _map_chunks(work, n, workers)
    return out


def _np_rotate(q, v):
    # v' = v + 2w (u x v) + 2 u x (u x v)
    u = q[..., 1:]
    w = q[..., :1]
    uv = np.cross(u, v)
    return v + 2.0 * w * uv + 2.0 * np.cross(u, uv)


def np_deskew(points, times, sample_t, sample_q, sample_p, ref_q, ref_p, hold_tol: float, workers: int = 1):
    """Re-express points captured at ``times`` in the frame of the reference pose.

    Each point's capture pose is interpolated (lerp + slerp) from the
    samples; times past the newest sample by at most ``hold_tol`` hold the
    newest pose. Points whose time cannot be bracketed are returned
    unchanged with valid=False.
    """
    n = len(points)
    out = points.copy()
    valid = np.zeros(n, dtype=bool)
    m = len(sample_t)
    if n == 0 or m == 0:
        return out, valid
    inv_ref_q = ref_q * np.array([1.0, -1.0, -1.0, -1.0])
    tc = times.copy()
    last = sample_t[-1]
    hold = (tc > last) & (tc <= last + hold_tol)
    tc[hold] = last
    ok = (tc >= sample_t[0]) & (tc <= last)
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return out, valid
    t = tc[idx]
    if m == 1:
        q = np.broadcast_to(sample_q[0], (len(idx), 4))
        p = np.broadcast_to(sample_p[0], (len(idx), 3))
    else:
        hi = np.clip(np.searchsorted(sample_t, t, side="right"), 1, m - 1)
        lo = hi - 1
        s = (t - sample_t[lo]) / (sample_t[hi] - sample_t[lo])
        s = np.clip(s, 0.0, 1.0)
        q0 = sample_q[lo]
        q1 = sample_q[hi]
        dot = np.sum(q0 * q1, axis=1)
        q1 = np.where((dot < 0)[:, None], -q1, q1)
        dot = np.minimum(np.abs(dot), 1.0)
        theta = np.arccos(dot)
        sin_t = np.sin(theta)
        small = sin_t < 1e-9
        safe = np.where(small, 1.0, sin_t)
        w0 = np.where(small, 1.0 - s, np.sin((1.0 - s) * theta) / safe)
        w1 = np.where(small, s, np.sin(s * theta) / safe)
        q = w0[:, None] * q0 + w1[:, None] * q1
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        p = (1.0 - s)[:, None] * sample_p[lo] + s[:, None] * sample_p[hi]
    # world point, then into the reference frame
    world = _np_rotate(q, points[idx]) + p
    out[idx] = _np_rotate(np.broadcast_to(inv_ref_q, (len(idx), 4)), world - ref_p)
    valid[idx] = True
    return out, valid


def grid_build(points: np.ndarray, cell: float, max_cells: int):
    """Dense cell grid over the bounding box -> (lo, cell, dims, order, start, sorted points).

    ``order`` sorts points by cell id (stable, so ascending index within a
    cell) and ``start[c]:start[c+1]`` spans cell ``c`` in that order. The
    cell edge grows until the grid fits in ``max_cells``.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    lo = pts.min(axis=0)
    ext = pts.max(axis=0) - lo
    while True:
        dims = np.floor(ext / cell).astype(np.int64) + 1
        if int(np.prod(dims)) <= max_cells:
            break
        cell *= 1.25
    ijk = np.minimum(np.floor((pts - lo) / cell).astype(np.int64), dims - 1)
    cid = (ijk[:, 0] * dims[1] + ijk[:, 1]) * dims[2] + ijk[:, 2]
    order = np.argsort(cid, kind="stable")
    start = np.zeros(int(np.prod(dims)) + 1, dtype=np.int64)
    np.cumsum(np.bincount(cid, minlength=len(start) - 1), out=start[1:])
    return lo, float(cell), dims, order, start, np.ascontiguousarray(pts[order])


def grid_occupancy(points: np.ndarray, cell: float, max_cells: int):
    """Coarse occupancy grid -> (lo, cell, dims, occupied flags), for emptiness tests."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    lo = pts.min(axis=0)
    ext = pts.max(axis=0) - lo
    while True:
        dims = np.floor(ext / cell).astype(np.int64) + 1
        if int(np.prod(dims)) <= max_cells:
            break
        cell *= 1.25
    ijk = np.minimum(np.floor((pts - lo) / cell).astype(np.int64), dims - 1)
    occupied = np.zeros(int(np.prod(dims)), dtype=np.bool_)
    occupied[(ijk[:, 0] * dims[1] + ijk[:, 1]) * dims[2] + ijk[:, 2]] = True
    return lo, float(cell), dims, occupied


numpy_impl = SimpleNamespace(
    neighbor_covariances=np_neighbor_covariances,
    gicp_terms=np_gicp_terms,
    gicp_costs=np_gicp_costs,
    deskew=np_deskew,
    grid_nearest=None,
    block_empty=None,
    name="numpy",
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_jacobi(a, v):
        for _ in range(JACOBI_SWEEPS):
            for pair in range(3):
                p = 0 if pair < 2 else 1
                q = 1 if pair == 0 else 2
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    sgn = 1.0 if theta >= 0.0 else -1.0
                    t = sgn / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                sn = t * c
                for k in range(3):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - sn * akq
                    a[k, q] = sn * akp + c * akq
                for k in range(3):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - sn * aqk
                    a[q, k] = sn * apk + c * aqk
                for k in range(3):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - sn * vkq
                    v[k, q] = sn * vkp + c * vkq

    @njit(cache=True, parallel=True)
    def _nb_neighbor_covariances(points, nbr_idx, floor, out):
        n, k = nbr_idx.shape
        for i in prange(n):
            mx = 0.0
            my = 0.0
            mz = 0.0
            for j in range(k):
                q = nbr_idx[i, j]
                mx += points[q, 0]
                my += points[q, 1]
                mz += points[q, 2]
            mx /= k
            my /= k
            mz /= k
            c = np.zeros((3, 3))
            for j in range(k):
                q = nbr_idx[i, j]
                dx = points[q, 0] - mx
                dy = points[q, 1] - my
                dz = points[q, 2] - mz
                c[0, 0] += dx * dx
                c[0, 1] += dx * dy
                c[0, 2] += dx * dz
                c[1, 1] += dy * dy
                c[1, 2] += dy * dz
                c[2, 2] += dz * dz
            c[1, 0] = c[0, 1]
            c[2, 0] = c[0, 2]
            c[2, 1] = c[1, 2]
            for a in range(3):
                for b in range(3):
                    c[a, b] /= k
            v = np.eye(3)
            _nb_jacobi(c, v)
            best = 0
            for a in range(1, 3):
                if c[a, a] < c[best, best]:
                    best = a
            for a in range(3):
                for b in range(3):
                    out[i, a, b] = -(1.0 - floor) * v[a, best] * v[b, best]
                out[i, a, a] += 1.0

    @njit(cache=True, inline="always")
    def _nb_inv3(m, w):
        a, b, c = m[0, 0], m[0, 1], m[0, 2]
        d, e, f = m[1, 0], m[1, 1], m[1, 2]
        g, h, k = m[2, 0], m[2, 1], m[2, 2]
        c00 = e * k - f * h
        c01 = -(d * k - f * g)
        c02 = d * h - e * g
        det = a * c00 + b * c01 + c * c02
        inv = 1.0 / det
        w[0, 0] = c00 * inv
        w[1, 0] = c01 * inv
        w[2, 0] = c02 * inv
        w[0, 1] = -(b * k - c * h) * inv
        w[1, 1] = (a * k - c * g) * inv
        w[2, 1] = -(a * h - b * g) * inv
        w[0, 2] = (b * f - c * e) * inv
        w[1, 2] = -(a * f - c * d) * inv
        w[2, 2] = (a * e - b * d) * inv

    @njit(cache=True, inline="always")
    def _nb_point_setup(i, src, src_cov, rot, trans, tgt, tgt_cov, p, d, m):
        for r in range(3):
            p[r] = rot[r, 0] * src[i, 0] + rot[r, 1] * src[i, 1] + rot[r, 2] * src[i, 2] + trans[r]
            d[r] = tgt[i, r] - p[r]
        # M = C_tgt + R C_src R^T
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for u in range(3):
                    ru = rot[r, u]
                    for v in range(3):
                        acc += ru * src_cov[i, u, v] * rot[c, v]
                m[r, c] = tgt_cov[i, r, c] + acc

    @njit(cache=True, parallel=True)
    def _nb_gicp_terms(src, src_cov, rot, trans, tgt, tgt_cov, out):
        n = src.shape[0]
        for i in prange(n):
            p = np.empty(3)
            d = np.empty(3)
            m = np.empty((3, 3))
            w = np.empty((3, 3))
            _nb_point_setup(i, src, src_cov, rot, trans, tgt, tgt_cov, p, d, m)
            _nb_inv3(m, w)
            px = np.zeros((3, 3))
            px[0, 1] = -p[2]
            px[0, 2] = p[1]
            px[1, 0] = p[2]
            px[1, 2] = -p[0]
            px[2, 0] = -p[1]
            px[2, 1] = p[0]
            wp = np.zeros((3, 3))
            for r in range(3):
                for c in range(3):
                    wp[r, c] = w[r, 0] * px[0, c] + w[r, 1] * px[1, c] + w[r, 2] * px[2, c]
            h = np.empty((6, 6))
            for r in range(3):
                for c in range(3):
                    h[r, c] = w[r, c]
                    h[r, c + 3] = -wp[r, c]
                    h[r + 3, c] = -wp[c, r]
                    h[r + 3, c + 3] = px[0, r] * wp[0, c] + px[1, r] * wp[1, c] + px[2, r] * wp[2, c]
            col = 0
            for r in range(6):
                for c in range(r, 6):
                    out[i, col] = h[r, c]
                    col += 1
            wd = np.empty(3)
            for r in range(3):
                wd[r] = w[r, 0] * d[0] + w[r, 1] * d[1] + w[r, 2] * d[2]
            for r in range(3):
                out[i, 21 + r] = -wd[r]
                out[i, 24 + r] = px[0, r] * wd[0] + px[1, r] * wd[1] + px[2, r] * wd[2]
            out[i, 27] = d[0] * wd[0] + d[1] * wd[1] + d[2] * wd[2]

    @njit(cache=True, parallel=True)
    def _nb_gicp_costs(src, src_cov, rot, trans, tgt, tgt_cov, out):
        n = src.shape[0]
        for i in prange(n):
            p = np.empty(3)
            d = np.empty(3)
            m = np.empty((3, 3))
            w = np.empty((3, 3))
            _nb_point_setup(i, src, src_cov, rot, trans, tgt, tgt_cov, p, d, m)
            _nb_inv3(m, w)
            acc = 0.0
            for r in range(3):
                acc += d[r] * (w[r, 0] * d[0] + w[r, 1] * d[1] + w[r, 2] * d[2])
            out[i] = acc

    @njit(cache=True, inline="always")
    def _nb_rotate(qw, qx, qy, qz, vx, vy, vz, res):
        # v' = v + 2w (u x v) + 2 u x (u x v)
        cx = qy * vz - qz * vy
        cy = qz * vx - qx * vz
        cz = qx * vy - qy * vx
        res[0] = vx + 2.0 * (qw * cx + qy * cz - qz * cy)
        res[1] = vy + 2.0 * (qw * cy + qz * cx - qx * cz)
        res[2] = vz + 2.0 * (qw * cz + qx * cy - qy * cx)

    @njit(cache=True, parallel=True)
    def _nb_deskew(points, times, sample_t, sample_q, sample_p, ref_q, ref_p, hold_tol, out, valid):
        n = points.shape[0]
        m = sample_t.shape[0]
        last = sample_t[m - 1]
        for i in prange(n):
            t = times[i]
            if t > last and t <= last + hold_tol:
                t = last
            if t < sample_t[0] or t > last:
                for r in range(3):
                    out[i, r] = points[i, r]
                valid[i] = False
                continue
            q = np.empty(4)
            p = np.empty(3)
            if m == 1:
                for r in range(4):
                    q[r] = sample_q[0, r]
                for r in range(3):
                    p[r] = sample_p[0, r]
            else:
                hi = np.searchsorted(sample_t, t, side="right")
                if hi < 1:
                    hi = 1
                if hi > m - 1:
                    hi = m - 1
                lo = hi - 1
                s = (t - sample_t[lo]) / (sample_t[hi] - sample_t[lo])
                s = min(max(s, 0.0), 1.0)
                dot = 0.0
                for r in range(4):
                    dot += sample_q[lo, r] * sample_q[hi, r]
                sign = 1.0
                if dot < 0:
                    sign = -1.0
                    dot = -dot
                if dot > 1.0:
                    dot = 1.0
                theta = math.acos(dot)
                sin_t = math.sin(theta)
                if sin_t < 1e-9:
                    w0 = 1.0 - s
                    w1 = s
                else:
                    w0 = math.sin((1.0 - s) * theta) / sin_t
                    w1 = math.sin(s * theta) / sin_t
                nrm = 0.0
                for r in range(4):
                    q[r] = w0 * sample_q[lo, r] + w1 * sign * sample_q[hi, r]
                    nrm += q[r] * q[r]
                nrm = math.sqrt(nrm)
                for r in range(4):
                    q[r] /= nrm
                for r in range(3):
                    p[r] = (1.0 - s) * sample_p[lo, r] + s * sample_p[hi, r]
            world = np.empty(3)
            _nb_rotate(q[0], q[1], q[2], q[3], points[i, 0], points[i, 1], points[i, 2], world)
            for r in range(3):
                world[r] += p[r] - ref_p[r]
            res = np.empty(3)
            _nb_rotate(ref_q[0], -ref_q[1], -ref_q[2], -ref_q[3], world[0], world[1], world[2], res)
            for r in range(3):
                out[i, r] = res[r]
            valid[i] = True

    @njit(cache=True)
    def _nb_grid_shell(lo, cell, dims, order, start, spts, qx, qy, qz, cx, cy, cz, r, best, bi):
        # scan the cells at Chebyshev ring r around (cx, cy, cz); returns the improved (best, bi)
        ny = dims[1]
        nz = dims[2]
        for ix in range(max(cx - r, 0), min(cx + r + 1, dims[0])):
            for iy in range(max(cy - r, 0), min(cy + r + 1, ny)):
                full = abs(ix - cx) == r or abs(iy - cy) == r
                zs = (cz - r, cz + r) if not full else (cz - r, cz + r + 1)
                for zi in range(2):
                    if full:
                        z0 = max(zs[0], 0)
                        z1 = min(zs[1], nz)
                        if zi == 1:
                            break
                    else:
                        z = zs[zi]
                        if r == 0 and zi == 1:
                            break
                        z0 = max(z, 0)
                        z1 = min(z + 1, nz)
                    if z1 <= z0:
                        continue
                    base = (ix * ny + iy) * nz
                    for t in range(start[base + z0], start[base + z1]):
                        ex = spts[t, 0] - qx
                        ey = spts[t, 1] - qy
                        ez = spts[t, 2] - qz
                        d2 = ex * ex + ey * ey + ez * ez
                        i = order[t]
                        if d2 < best or (d2 == best and i < bi):
                            best = d2
                            bi = i
        return best, bi

    @njit(cache=True, parallel=True)
    def _nb_grid_nearest(lo, cell, dims, order, start, spts, q, max_dist, max_ring, out_i, out_d, need):
        inv = 1.0 / cell
        md2 = max_dist * max_dist
        for j in prange(len(q)):
            qx = q[j, 0]
            qy = q[j, 1]
            qz = q[j, 2]
            fx = (qx - lo[0]) * inv
            fy = (qy - lo[1]) * inv
            fz = (qz - lo[2]) * inv
            cx = int(math.floor(fx))
            cy = int(math.floor(fy))
            cz = int(math.floor(fz))
            # distance from the query to the faces of its own cell
            m0 = min(fx - cx, cx + 1 - fx, fy - cy, cy + 1 - fy, fz - cz, cz + 1 - fz)
            best = np.inf
            bi = -1
            need[j] = True
            for r in range(max_ring + 1):
                best, bi = _nb_grid_shell(lo, cell, dims, order, start, spts, qx, qy, qz, cx, cy, cz, r, best, bi)
                # every point outside rings 0..r is at least this far away
                m = (m0 + r) * cell
                if bi >= 0 and best < m * m:
                    need[j] = False
                    break
                if bi < 0 and m >= max_dist:
                    need[j] = False
                    break
            if need[j]:
                continue
            if bi >= 0 and best <= md2:
                out_i[j] = bi
                out_d[j] = math.sqrt(best)
            else:
                out_i[j] = -1
                out_d[j] = np.inf

    @njit(cache=True, parallel=True)
    def _nb_block_empty(lo, cell, dims, occupied, q, out):
        inv = 1.0 / cell
        for j in prange(len(q)):
            cx = int(math.floor((q[j, 0] - lo[0]) * inv))
            cy = int(math.floor((q[j, 1] - lo[1]) * inv))
            cz = int(math.floor((q[j, 2] - lo[2]) * inv))
            empty = True
            for ix in range(max(cx - 1, 0), min(cx + 2, dims[0])):
                for iy in range(max(cy - 1, 0), min(cy + 2, dims[1])):
                    for iz in range(max(cz - 1, 0), min(cz + 2, dims[2])):
                        if occupied[(ix * dims[1] + iy) * dims[2] + iz]:
                            empty = False
            out[j] = empty

    def _set_threads(workers: int) -> None:
        numba.set_num_threads(max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS)))

    def nb_neighbor_covariances(points, nbr_idx, floor, workers: int = 1):
        _set_threads(workers)
        out = np.empty((len(points), 3, 3))
        if len(points):
            _nb_neighbor_covariances(
                np.ascontiguousarray(points, dtype=np.float64),
                np.ascontiguousarray(nbr_idx, dtype=np.int64),
                float(floor),
                out,
            )
        return out

    def _f64(a):
        return np.ascontiguousarray(a, dtype=np.float64)

    def nb_gicp_terms(src, src_cov, rot, trans, tgt, tgt_cov, workers: int = 1):
        _set_threads(workers)
        out = np.empty((len(src), 28))
        if len(src):
            _nb_gicp_terms(_f64(src), _f64(src_cov), _f64(rot), _f64(trans), _f64(tgt), _f64(tgt_cov), out)
        return out

    def nb_gicp_costs(src, src_cov, rot, trans, tgt, tgt_cov, workers: int = 1):
        _set_threads(workers)
        out = np.empty(len(src))
        if len(src):
            _nb_gicp_costs(_f64(src), _f64(src_cov), _f64(rot), _f64(trans), _f64(tgt), _f64(tgt_cov), out)
        return out

    def nb_grid_nearest(grid, query, max_dist: float, workers: int = 1, max_ring: int = 4):
        """Nearest neighbour per query from a ``grid_build`` grid.

        Returns (index, distance, need); rows flagged in ``need`` could not
        be settled within ``max_ring`` cell rings and must be answered elsewhere.
        """
        _set_threads(workers)
        lo, cell, dims, order, start, spts = grid
        n = len(query)
        out_i = np.empty(n, dtype=np.int64)
        out_d = np.empty(n)
        need = np.empty(n, dtype=np.bool_)
        if n:
            _nb_grid_nearest(lo, cell, dims, order, start, spts, _f64(query), float(max_dist), int(max_ring), out_i, out_d, need)
        return out_i, out_d, need

    def nb_block_empty(occupancy, query, workers: int = 1):
        """True where no occupied coarse cell touches the query's 3x3x3 block,
        i.e. no point lies within one coarse cell edge of it."""
        _set_threads(workers)
        lo, cell, dims, occupied = occupancy
        out = np.empty(len(query), dtype=np.bool_)
        if len(query):
            _nb_block_empty(lo, cell, dims, occupied, _f64(query), out)
        return out

    def nb_deskew(points, times, sample_t, sample_q, sample_p, ref_q, ref_p, hold_tol: float, workers: int = 1):
        _set_threads(workers)
        n = len(points)
        out = np.empty((n, 3))
        valid = np.zeros(n, dtype=np.bool_)
        if n == 0:
            return out, valid
        if len(sample_t) == 0:
            return _f64(points).copy(), valid
        _nb_deskew(
            _f64(points), _f64(times), _f64(sample_t), _f64(sample_q), _f64(sample_p),
            _f64(ref_q), _f64(ref_p), float(hold_tol), out, valid,
        )
        return out, valid

    numba_impl = SimpleNamespace(
        neighbor_covariances=nb_neighbor_covariances,
        gicp_terms=nb_gicp_terms,
        gicp_costs=nb_gicp_costs,
        deskew=nb_deskew,
        grid_nearest=nb_grid_nearest,
        block_empty=nb_block_empty,
        name="numba",
    )
else:  # pragma: no cover
    numba_impl = None


def active():
    """The implementation namespace selected for this process."""
    return numba_impl if USE_NUMBA else numpy_impl


def reduce_terms(terms: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Sum per-point GN terms in fixed order -> (H 6x6, g 6, total cost)."""
    total = terms.sum(axis=0)
    h = np.zeros((6, 6))
    h[_TRIU] = total[:21]
    h = h + np.triu(h, 1).T
    return h, total[21:27], float(total[27])
