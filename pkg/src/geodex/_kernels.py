"""Hot numeric kernels: numba-compiled with a pure-numpy fallback.

Set GEODEX_NO_NUMBA=1 to select the numpy path (also used automatically when
numba is not importable).  Both paths perform the same floating-point
operations in the same order, so results are bit-identical either way; the
test suite asserts this.  benchmarks/bench_kernels.py compares their speed.

Kernels here are the per-step physics update, point-cloud rotation, surface
sampling, and scalar quaternion ops.  Dense-layer matmuls are deliberately
NOT here: BLAS already owns those.
"""

import math
import os

import numpy as np

NUMBA_ENABLED = os.environ.get("GEODEX_NO_NUMBA", "") != "1"
if NUMBA_ENABLED:
    try:
        from numba import njit as _njit
    except ImportError:
        NUMBA_ENABLED = False

_F8 = np.float64


# ---------------------------------------------------------------------------
# scalar quaternion ops (shared source: compiled by numba, or run as python)
# ---------------------------------------------------------------------------

def _quat_mul_src(q1, q2, out):
    a, b, c, d = q1[0], q1[1], q1[2], q1[3]
    e, f, g, h = q2[0], q2[1], q2[2], q2[3]
    out[0] = a * e - b * f - c * g - d * h
    out[1] = a * f + b * e + c * h - d * g
    out[2] = a * g - b * h + c * e + d * f
    out[3] = a * h + b * g - c * f + d * e


def _quat_to_mat_src(q, out):
    w, x, y, z = q[0], q[1], q[2], q[3]
    out[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[0, 1] = 2.0 * (x * y - w * z)
    out[0, 2] = 2.0 * (x * z + w * y)
    out[1, 0] = 2.0 * (x * y + w * z)
    out[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[1, 2] = 2.0 * (y * z - w * x)
    out[2, 0] = 2.0 * (x * z - w * y)
    out[2, 1] = 2.0 * (y * z + w * x)
    out[2, 2] = 1.0 - 2.0 * (x * x + y * y)


def _physics_step_src(q, w, inertia, inv_inertia, tau, damping, dt, q_out, w_out):
    # body-frame Euler rotation equations, explicit step:
    #   w' = w + dt * I^-1 (tau - w x (I w) - c w)
    # then attitude by the quaternion exponential of w'*dt, renormalized.
    iw0 = inertia[0, 0] * w[0] + inertia[0, 1] * w[1] + inertia[0, 2] * w[2]
    iw1 = inertia[1, 0] * w[0] + inertia[1, 1] * w[1] + inertia[1, 2] * w[2]
    iw2 = inertia[2, 0] * w[0] + inertia[2, 1] * w[1] + inertia[2, 2] * w[2]
    cx0 = w[1] * iw2 - w[2] * iw1
    cx1 = w[2] * iw0 - w[0] * iw2
    cx2 = w[0] * iw1 - w[1] * iw0
    r0 = tau[0] - cx0 - damping * w[0]
    r1 = tau[1] - cx1 - damping * w[1]
    r2 = tau[2] - cx2 - damping * w[2]
    w_out[0] = w[0] + dt * (inv_inertia[0, 0] * r0 + inv_inertia[0, 1] * r1 + inv_inertia[0, 2] * r2)
    w_out[1] = w[1] + dt * (inv_inertia[1, 0] * r0 + inv_inertia[1, 1] * r1 + inv_inertia[1, 2] * r2)
    w_out[2] = w[2] + dt * (inv_inertia[2, 0] * r0 + inv_inertia[2, 1] * r1 + inv_inertia[2, 2] * r2)

    p0 = w_out[0] * dt
    p1 = w_out[1] * dt
    p2 = w_out[2] * dt
    n = math.sqrt(p0 * p0 + p1 * p1 + p2 * p2)
    if n < 1e-12:
        dw, dx, dy, dz = 1.0, 0.0, 0.0, 0.0
    else:
        h = 0.5 * n
        s = math.sin(h) / n
        dw = math.cos(h)
        dx = p0 * s
        dy = p1 * s
        dz = p2 * s

    a, b, c, d = q[0], q[1], q[2], q[3]
    qw = a * dw - b * dx - c * dy - d * dz
    qx = a * dx + b * dw + c * dz - d * dy
    qy = a * dy - b * dz + c * dw + d * dx
    qz = a * dz + b * dy - c * dx + d * dw
    qn = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    q_out[0] = qw / qn
    q_out[1] = qx / qn
    q_out[2] = qy / qn
    q_out[3] = qz / qn


def _rotate_points_loop_src(rot, pts, out):
    # out = pts @ rot.T, written with an explicit left-to-right sum so the
    # numpy mirror below produces bit-identical values (no FMA contraction).
    for i in range(pts.shape[0]):
        x, y, z = pts[i, 0], pts[i, 1], pts[i, 2]
        out[i, 0] = rot[0, 0] * x + rot[0, 1] * y + rot[0, 2] * z
        out[i, 1] = rot[1, 0] * x + rot[1, 1] * y + rot[1, 2] * z
        out[i, 2] = rot[2, 0] * x + rot[2, 1] * y + rot[2, 2] * z


def _sample_points_loop_src(cum, v0, e1, e2, fn, uf, ua, ub, pts, nrm):
    total = cum[cum.shape[0] - 1]
    for i in range(uf.shape[0]):
        t = uf[i] * total
        lo = 0
        hi = cum.shape[0]
        while lo < hi:
            mid = (lo + hi) // 2
            if cum[mid] <= t:
                lo = mid + 1
            else:
                hi = mid
        f = lo
        if f >= cum.shape[0]:
            f = cum.shape[0] - 1
        r1 = math.sqrt(ua[i])
        b = r1 * (1.0 - ub[i])
        c = r1 * ub[i]
        for j in range(3):
            pts[i, j] = (v0[f, j] + b * e1[f, j]) + c * e2[f, j]
            nrm[i, j] = fn[f, j]


# ---------------------------------------------------------------------------
# numpy fallbacks (vectorized, mirrored operation order)
# ---------------------------------------------------------------------------

def quat_mul_np(q1, q2):
    out = np.empty(4, dtype=_F8)
    _quat_mul_src(q1, q2, out)
    return out


def quat_to_mat_np(q):
    out = np.empty((3, 3), dtype=_F8)
    _quat_to_mat_src(q, out)
    return out


def physics_step_np(q, w, inertia, inv_inertia, tau, damping, dt):
    q_out = np.empty(4, dtype=_F8)
    w_out = np.empty(3, dtype=_F8)
    _physics_step_src(q, w, inertia, inv_inertia, tau, damping, dt, q_out, w_out)
    return q_out, w_out


def rotate_points_np(rot, pts):
    # elementwise mirror of the loop kernel; avoids BLAS so that the numba
    # path (which does not fuse multiply-add) matches bit-for-bit
    x = pts[:, 0:1]
    y = pts[:, 1:2]
    z = pts[:, 2:3]
    return (rot[:, 0] * x + rot[:, 1] * y) + rot[:, 2] * z


def sample_points_np(cum, v0, e1, e2, fn, uf, ua, ub):
    total = cum[-1]
    idx = np.searchsorted(cum, uf * total, side="right")
    np.clip(idx, 0, cum.shape[0] - 1, out=idx)
    r1 = np.sqrt(ua)
    b = (r1 * (1.0 - ub))[:, None]
    c = (r1 * ub)[:, None]
    pts = (v0[idx] + b * e1[idx]) + c * e2[idx]
    return pts, fn[idx].copy()


# ---------------------------------------------------------------------------
# numba-compiled variants and public bindings
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:
    _quat_mul_nb = _njit(cache=True)(_quat_mul_src)
    _quat_to_mat_nb = _njit(cache=True)(_quat_to_mat_src)
    _physics_step_nb = _njit(cache=True)(_physics_step_src)
    _rotate_points_nb = _njit(cache=True)(_rotate_points_loop_src)
    _sample_points_nb = _njit(cache=True)(_sample_points_loop_src)

    def quat_mul_numba(q1, q2):
        out = np.empty(4, dtype=_F8)
        _quat_mul_nb(q1, q2, out)
        return out

    def quat_to_mat_numba(q):
        out = np.empty((3, 3), dtype=_F8)
        _quat_to_mat_nb(q, out)
        return out

    def physics_step_numba(q, w, inertia, inv_inertia, tau, damping, dt):
        q_out = np.empty(4, dtype=_F8)
        w_out = np.empty(3, dtype=_F8)
        _physics_step_nb(q, w, inertia, inv_inertia, tau, damping, dt, q_out, w_out)
        return q_out, w_out

    def rotate_points_numba(rot, pts):
        out = np.empty((pts.shape[0], 3), dtype=_F8)
        _rotate_points_nb(rot, pts, out)
        return out

    def sample_points_numba(cum, v0, e1, e2, fn, uf, ua, ub):
        n = uf.shape[0]
        pts = np.empty((n, 3), dtype=_F8)
        nrm = np.empty((n, 3), dtype=_F8)
        _sample_points_nb(cum, v0, e1, e2, fn, uf, ua, ub, pts, nrm)
        return pts, nrm

    quat_mul = quat_mul_numba
    quat_to_mat = quat_to_mat_numba
    physics_step = physics_step_numba
    rotate_points = rotate_points_numba
    sample_points = sample_points_numba
else:
    quat_mul_numba = None
    quat_to_mat_numba = None
    physics_step_numba = None
    rotate_points_numba = None
    sample_points_numba = None

    quat_mul = quat_mul_np
    quat_to_mat = quat_to_mat_np
    physics_step = physics_step_np
    rotate_points = rotate_points_np
    sample_points = sample_points_np
