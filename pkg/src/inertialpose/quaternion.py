"""Quaternion and rotation-representation algebra.

Conventions (enforced by the test-suite):

* Quaternions are numpy arrays ``[..., 4]`` ordered ``[w, x, y, z]``
  (scalar first) and composed with the Hamilton product.
* A quaternion ``q`` describing a sensor or segment maps body-frame
  coordinates to world-frame coordinates, ``v_world = q * v_body * q^-1``.
  A world vector is re-expressed in the body frame with the inverse,
  e.g. the accelerometer at rest reads ``rotate(inverse(q), [0, 0, 1])``.
* The world frame is North-West-Up (NWU).
* Angular velocity is expressed in the body frame, so integration is a
  right-multiplication ``q * exp(0.5 * omega * dt)``.
* Euler angles are intrinsic Z-Y-X, returned as ``(yaw, pitch, roll)``.

All functions broadcast over leading dimensions and are pure.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DegenerateGeometryError, DomainError

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

# Gradients of arccos are unbounded at |x| = 1.
GRAD_CLAMP = 1.0 - 1e-12
DEFAULT_GYRO_SATURATION = 35.0  # rad/s


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DomainError("non-finite quaternion or vector input")


def quat(w, x, y, z):
    """Build a unit quaternion from components (normalized on construction)."""
    return normalize(np.array([w, x, y, z], dtype=float))


def normalize(q, eps=1e-15):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < eps):
        raise DomainError("cannot normalize a zero quaternion")
    return q / n


def conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


inverse = conjugate  # unit quaternions only


def multiply_raw(a, b):
    """Hamilton product without renormalization."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def multiply(a, b):
    """Hamilton product ``a * b``, renormalized."""
    _check_finite(a, b)
    return normalize(multiply_raw(a, b))


def rotate(q, v):
    """Rotate vectors ``v`` (shape ``[..., 3]``) by quaternions ``q``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def dot(a, b):
    return np.sum(np.asarray(a, dtype=float) * np.asarray(b, dtype=float), axis=-1)


def positive_hemisphere(q):
    """Flip sign so that w >= 0 (canonical representative)."""
    q = np.asarray(q, dtype=float)
    return np.where(q[..., :1] < 0, -q, q)


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DomainError("zero rotation axis")
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis / n], axis=-1)


def angle(q):
    """Rotation angle of ``q`` in [0, pi]."""
    q = np.asarray(q, dtype=float)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0]))


def exp_map(rotvec):
    """Quaternion of a rotation vector (axis * angle, radians)."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(half)/theta written via np.sinc to stay exact at theta = 0
    scale = 0.5 * np.sinc(half / np.pi)
    return np.concatenate([np.cos(half), scale * rotvec], axis=-1)


def log_map(q):
    """Rotation vector of ``q``, taking the shortest arc."""
    q = positive_hemisphere(q)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    theta = 2.0 * np.arctan2(s, q[..., :1])
    safe = np.where(s > 1e-12, s, 1.0)
    factor = np.where(s > 1e-12, theta / safe, 2.0 / np.maximum(q[..., :1], 1e-300))
    return v * factor


def slerp(a, b, t):
    """Spherical interpolation along the shortest arc; ``t`` broadcasts."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t = np.asarray(t, dtype=float)
    b = np.where((dot(a, b) < 0)[..., None], -b, b)
    rel = multiply_raw(conjugate(a), b)
    return normalize(multiply_raw(a, exp_map(log_map(rel) * t[..., None])))


def qad(q_target, q_pred):
    """Quaternion angle distance ``2 * arccos(|<q_target, q_pred>|)`` in radians.

    Evaluated as ``4 * atan2(|a - s b|, |a + s b|)`` with ``s = sign(a . b)``,
    which equals the arccos form for unit inputs but keeps full precision
    for nearly equal rotations (``qad(q, q)`` and ``qad(q, -q)`` are exactly 0).
    """
    _check_finite(q_target, q_pred)
    a = np.asarray(q_target, dtype=float)
    b = np.asarray(q_pred, dtype=float)
    b = np.where((dot(a, b) < 0)[..., None], -b, b)
    return 4.0 * np.arctan2(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))


def qad_grad(q_target, q_pred):
    """Gradient of :func:`qad` with respect to ``q_pred``.

    Uses the inner-product clamp ``1 - 1e-12`` so the slope stays finite.
    """
    q_target = np.asarray(q_target, dtype=float)
    d = dot(q_target, q_pred)
    ad = np.clip(np.abs(d), 0.0, GRAD_CLAMP)
    coef = -2.0 * np.sign(d) / np.sqrt(1.0 - ad * ad)
    coef = np.where(np.abs(d) >= GRAD_CLAMP, 0.0, coef)
    return coef[..., None] * q_target


def qdist_loss(q_target, q_pred):
    """Squared error against whichever of ``+-q_pred`` lies closer to ``q_target``."""
    q_target = np.asarray(q_target, dtype=float)
    q_pred = np.asarray(q_pred, dtype=float)
    sign = np.where(dot(q_target, q_pred) < 0, -1.0, 1.0)[..., None]
    return np.mean((q_target - sign * q_pred) ** 2, axis=-1)


def relative_to_root(qs, root_index=0):
    """Express segment orientations ``[..., S, 4]`` relative to the root segment."""
    qs = np.asarray(qs, dtype=float)
    root = qs[..., root_index : root_index + 1, :]
    return multiply_raw(conjugate(root), qs)


def rel_qad(targets, preds, root_index=0):
    """Mean QAD after expressing both sets relative to their own root segment.

    ``targets`` and ``preds`` are ``[..., S, 4]`` in skeleton order.
    """
    targets = np.asarray(targets, dtype=float)
    preds = np.asarray(preds, dtype=float)
    if targets.shape != preds.shape:
        raise ContractError(f"shape mismatch {targets.shape} vs {preds.shape}")
    if targets.shape[-2] <= root_index:
        raise ContractError("root segment missing")
    return float(np.mean(qad(relative_to_root(targets, root_index), relative_to_root(preds, root_index))))


def integrate_gyro(q, omega, dt=1.0 / 60.0, saturation=DEFAULT_GYRO_SATURATION):
    """Exact exponential-map update ``q * exp(0.5 * omega * dt)``.

    ``omega`` is clipped per axis at ``saturation`` rad/s (pass ``None`` to
    disable).
    """
    if not dt > 0:
        raise ContractError(f"dt must be positive, got {dt}")
    omega = np.asarray(omega, dtype=float)
    _check_finite(q, omega)
    if saturation is not None:
        omega = np.clip(omega, -saturation, saturation)
    return normalize(multiply_raw(q, exp_map(omega * dt)))


def to_matrix(q):
    """Rotation matrix (body to world) of ``q``; shape ``[..., 3, 3]``."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def from_matrix(m):
    """Quaternion of a rotation matrix (Shepperd's method), ``w >= 0``."""
    m = np.asarray(m, dtype=float)
    m00, m11, m22 = m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]
    trace = m00 + m11 + m22
    cands = np.stack(
        [
            np.stack([1 + trace, m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]], -1),
            np.stack([m[..., 2, 1] - m[..., 1, 2], 1 + m00 - m11 - m22, m[..., 0, 1] + m[..., 1, 0], m[..., 0, 2] + m[..., 2, 0]], -1),
            np.stack([m[..., 0, 2] - m[..., 2, 0], m[..., 0, 1] + m[..., 1, 0], 1 - m00 + m11 - m22, m[..., 1, 2] + m[..., 2, 1]], -1),
            np.stack([m[..., 1, 0] - m[..., 0, 1], m[..., 0, 2] + m[..., 2, 0], m[..., 1, 2] + m[..., 2, 1], 1 - m00 - m11 + m22], -1),
        ],
        axis=-2,
    )
    pick = np.argmax(np.stack([trace, m00, m11, m22], -1), axis=-1)
    q = np.take_along_axis(cands, pick[..., None, None], axis=-2)[..., 0, :]
    return positive_hemisphere(normalize(q))


def quat_to_repr6d(q):
    """First two rotation-matrix columns, concatenated column-major."""
    m = to_matrix(q)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def repr6d_to_matrix(r, eps=1e-9):
    r = np.asarray(r, dtype=float)
    a, b = r[..., :3], r[..., 3:6]
    if np.any(np.linalg.norm(np.cross(a, b), axis=-1) <= eps):
        raise DegenerateGeometryError("6D representation has parallel or zero columns")
    c0 = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b - np.sum(c0 * b, axis=-1, keepdims=True) * c0
    c1 = b / np.linalg.norm(b, axis=-1, keepdims=True)
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=-1)


def repr6d_to_quat(r):
    return from_matrix(repr6d_to_matrix(r))


def euler_to_quat(yaw, pitch, roll):
    """Intrinsic Z-Y-X Euler angles (radians) to quaternion."""
    yaw, pitch, roll = (np.asarray(v, dtype=float) for v in (yaw, pitch, roll))
    cy, sy = np.cos(0.5 * yaw), np.sin(0.5 * yaw)
    cp, sp = np.cos(0.5 * pitch), np.sin(0.5 * pitch)
    cr, sr = np.cos(0.5 * roll), np.sin(0.5 * roll)
    return np.stack(
        [
            cy * cp * cr + sy * sp * sr,
            cy * cp * sr - sy * sp * cr,
            cy * sp * cr + sy * cp * sr,
            sy * cp * cr - cy * sp * sr,
        ],
        axis=-1,
    )


def quat_to_euler(q, gimbal_tol=1e-9):
    """Quaternion to intrinsic Z-Y-X ``(yaw, pitch, roll)``.

    Pitch is clamped to +-pi/2. In gimbal lock yaw and roll are not
    separable; roll is reported as 0 and the combined angle goes to yaw.
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    sp = np.clip(2.0 * (w * y - x * z), -1.0, 1.0)
    pitch = np.arcsin(sp)
    yaw = np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    roll = np.arctan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    locked = np.abs(sp) > 1.0 - gimbal_tol
    locked_yaw = -2.0 * np.sign(sp) * np.arctan2(x, w)
    yaw = np.where(locked, locked_yaw, yaw)
    roll = np.where(locked, 0.0, roll)
    pitch = np.where(locked, np.sign(sp) * np.pi / 2, pitch)
    return yaw, pitch, roll


def twist_angle(q, axis=(0.0, 0.0, 1.0)):
    """Angle of the twist component of ``q`` about ``axis`` (swing-twist)."""
    q = np.asarray(q, dtype=float)
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    proj = np.sum(q[..., 1:] * axis, axis=-1)
    t = 2.0 * np.arctan2(proj, q[..., 0])
    return (t + np.pi) % (2 * np.pi) - np.pi


def shortest_arc(u, v):
    """Minimal rotation taking direction ``u`` onto direction ``v``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    u = u / np.linalg.norm(u, axis=-1, keepdims=True)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    c = np.sum(u * v, axis=-1, keepdims=True)
    axis = np.cross(u, v)
    if np.any(c < -1 + 1e-12):
        raise DegenerateGeometryError("antiparallel directions have no unique shortest arc")
    return normalize(np.concatenate([1.0 + c, axis], axis=-1))


def random_quaternions(n, rng):
    """Uniformly distributed unit quaternions (Shoemake); ``n`` is a count or shape."""
    shape = (n,) if np.isscalar(n) else tuple(n)
    u1, u2, u3 = rng.random((3,) + shape)
    a = np.sqrt(1 - u1)
    b = np.sqrt(u1)
    return np.stack(
        [a * np.sin(2 * np.pi * u2), a * np.cos(2 * np.pi * u2), b * np.sin(2 * np.pi * u3), b * np.cos(2 * np.pi * u3)],
        axis=-1,
    )
