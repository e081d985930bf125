"""Rotation and quaternion arithmetic.

Quaternions are float64 arrays (w, x, y, z), Hamilton convention, scalar
first.  q and -q denote the same orientation; every comparison here is
sign-invariant.  Rotation matrices are 3x3 row-major, acting on column
vectors; all functions are pure.
"""

import numpy as np

from . import _kernels
from .errors import Degenerate, NotARotation, ZeroNorm

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])

_SQRT2 = np.sqrt(2.0)


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.sqrt(np.dot(q, q))
    if n <= 1e-12:
        raise ZeroNorm(f"quaternion norm {n} too small")
    return q / n


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_mul(q1, q2):
    return _kernels.quat_mul(np.asarray(q1, dtype=np.float64),
                             np.asarray(q2, dtype=np.float64))


def quat_to_matrix(q):
    return _kernels.quat_to_mat(np.asarray(q, dtype=np.float64))


def _check_rotation(r):
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise NotARotation(f"expected 3x3, got {r.shape}")
    dev = np.abs(r.T @ r - np.eye(3)).max()
    if dev > 1e-4:
        raise NotARotation(f"R^T R deviates from identity by {dev:.3e}")
    if np.linalg.det(r) < 0.0:
        raise NotARotation("determinant is negative (reflection)")
    return r


def matrix_to_quat(r):
    """Inverse of quat_to_matrix, canonical sign (w >= 0)."""
    r = _check_rotation(r)
    t = r[0, 0] + r[1, 1] + r[2, 2]
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array([(r[2, 1] - r[1, 2]) / s,
                      0.25 * s,
                      (r[0, 1] + r[1, 0]) / s,
                      (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] >= r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array([(r[0, 2] - r[2, 0]) / s,
                      (r[0, 1] + r[1, 0]) / s,
                      0.25 * s,
                      (r[1, 2] + r[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array([(r[1, 0] - r[0, 1]) / s,
                      (r[0, 2] + r[2, 0]) / s,
                      (r[1, 2] + r[2, 1]) / s,
                      0.25 * s])
    q = quat_normalize(q)
    if q[0] < 0.0 or (q[0] == 0.0 and _first_nonzero_negative(q)):
        q = -q
    return q


def _first_nonzero_negative(q):
    for v in q[1:]:
        if v != 0.0:
            return v < 0.0
    return False


def geodesic_angle(q1, q2):
    """Rotation angle between two unit quaternions, in [0, pi]."""
    d = abs(float(np.dot(q1, q2)))
    return 2.0 * np.arccos(min(d, 1.0))


def geodesic_angle_batch(q1, q2):
    d = np.abs(np.sum(np.asarray(q1) * np.asarray(q2), axis=-1))
    return 2.0 * np.arccos(np.minimum(d, 1.0))


def orientations_equal(q1, q2, tol=1e-9):
    return min(np.linalg.norm(q1 - q2), np.linalg.norm(q1 + q2)) < tol


def rotation_loss(r_hat, r):
    """Geodesic-angle loss 2*arcsin(||Rhat-R||_F / (2*sqrt(2))) and its
    gradient w.r.t. Rhat.

    Equals the rotation angle between Rhat and R when both are valid
    rotations.  The arcsin argument is clamped to [0,1] in the forward value;
    the gradient clamps it to 1-1e-7 (the derivative diverges at angle pi)
    and is zero at Rhat == R.
    """
    d = np.asarray(r_hat, dtype=np.float64) - np.asarray(r, dtype=np.float64)
    s = np.sqrt(np.sum(d * d))
    u = s / (2.0 * _SQRT2)
    loss = 2.0 * np.arcsin(min(u, 1.0))
    if s < 1e-12:
        grad = np.zeros((3, 3))
    else:
        ug = min(u, 1.0 - 1e-7)
        grad = d / (_SQRT2 * s * np.sqrt(1.0 - ug * ug))
    return loss, grad


def random_rotation_z(rng):
    """Uniform rotation about the z axis."""
    half = 0.5 * rng.uniform(0.0, 2.0 * np.pi)
    return np.array([np.cos(half), 0.0, 0.0, np.sin(half)])


def random_rotation_so3(rng):
    """Uniform on SO(3): normalized 4-vector of independent normals."""
    while True:
        v = rng.standard_normal(4)
        n = np.sqrt(np.dot(v, v))
        if n > 1e-12:
            return v / n


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n <= 1e-12:
        raise ZeroNorm("axis norm too small")
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis / n))


def project_to_so3(m):
    """Map a raw 6-vector to a rotation via Gram-Schmidt.

    First three numbers become column 1 (normalized), the second three are
    orthogonalized against it for column 2, column 3 is their cross product.
    """
    m = np.asarray(m, dtype=np.float64)
    a = m[:3]
    b = m[3:6]
    na = np.sqrt(np.dot(a, a))
    if na <= 1e-9:
        raise Degenerate("first 3-vector has near-zero norm")
    c1 = a / na
    w = b - np.dot(c1, b) * c1
    nw = np.sqrt(np.dot(w, w))
    if nw <= 1e-9:
        raise Degenerate("second 3-vector is near-parallel to the first")
    c2 = w / nw
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=1)


def project_to_so3_backward(m, grad_r):
    """Gradient of project_to_so3: maps dL/dR back to dL/dm (6,)."""
    m = np.asarray(m, dtype=np.float64)
    a = m[:3]
    b = m[3:6]
    na = np.sqrt(np.dot(a, a))
    c1 = a / na
    w = b - np.dot(c1, b) * c1
    nw = np.sqrt(np.dot(w, w))
    c2 = w / nw

    g1 = grad_r[:, 0].astype(np.float64)
    g2 = grad_r[:, 1].astype(np.float64)
    g3 = grad_r[:, 2].astype(np.float64)

    # c3 = c1 x c2 contributes through both factors
    g1 = g1 + np.cross(c2, g3)
    g2 = g2 + np.cross(g3, c1)

    # c2 = w / |w|
    gw = (g2 - np.dot(c2, g2) * c2) / nw

    # w = b - (c1 . b) c1
    gb = gw - np.dot(c1, gw) * c1
    g1 = g1 - np.dot(c1, gw) * b - np.dot(c1, b) * gw

    # c1 = a / |a|
    ga = (g1 - np.dot(c1, g1) * c1) / na
    return np.concatenate([ga, gb])


def quat_rotate_points(q, pts):
    """Rotate an (n,3) array of points (or normals) by a unit quaternion."""
    return _kernels.rotate_points(quat_to_matrix(q), np.ascontiguousarray(pts, dtype=np.float64))


def relative_rotation_matrix(q_current, q_goal):
    """World-frame rotation mapping current-orientation points onto
    goal-orientation points: R_rel = R(q_goal) @ R(q_current)^T."""
    return quat_to_matrix(q_goal) @ quat_to_matrix(q_current).T
