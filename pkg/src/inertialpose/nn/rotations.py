"""Differentiable conversions from network outputs to unit quaternions."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from . import autograd as ag

WIDTH = {"euler": 3, "quaternion": 4, "repr6d": 6, "rotvec": 3}
# head bias that decodes to the identity rotation
IDENTITY_BIAS = {
    "euler": [0.0, 0.0, 0.0],
    "quaternion": [1.0, 0.0, 0.0, 0.0],
    "repr6d": [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    "rotvec": [0.0, 0.0, 0.0],
}


def euler_to_quat(e):
    """Intrinsic Z-Y-X ``(yaw, pitch, roll)`` tensor ``[..., 3]`` to quaternions."""
    half = e * 0.5
    c = ag.cos(half)
    s = ag.sin(half)
    cy, cp, cr = c[..., 0], c[..., 1], c[..., 2]
    sy, sp, sr = s[..., 0], s[..., 1], s[..., 2]
    return ag.stack(
        [
            cy * cp * cr + sy * sp * sr,
            cy * cp * sr - sy * sp * cr,
            cy * sp * cr + sy * cp * sr,
            sy * cp * cr - cy * sp * sr,
        ],
        axis=-1,
    )


def repr6d_to_quat(r):
    """Gram-Schmidt the two columns, complete with a cross product, convert."""
    c0 = ag.normalize(r[..., 0:3])
    b = r[..., 3:6]
    c1 = ag.normalize(b - c0 * ag.dot(c0, b).reshape(c0.shape[:-1] + (1,)))
    c2 = ag.cross(c0, c1)
    # m[i][j] is component i of column j
    m = [[c0[..., 0], c1[..., 0], c2[..., 0]], [c0[..., 1], c1[..., 1], c2[..., 1]], [c0[..., 2], c1[..., 2], c2[..., 2]]]
    d = np.stack([m[0][0].data + m[1][1].data + m[2][2].data, m[0][0].data, m[1][1].data, m[2][2].data], -1)
    pick = np.argmax(d, axis=-1)
    one = 1.0
    cands = [
        ag.stack([one + m[0][0] + m[1][1] + m[2][2], m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]], -1),
        ag.stack([m[2][1] - m[1][2], one + m[0][0] - m[1][1] - m[2][2], m[0][1] + m[1][0], m[0][2] + m[2][0]], -1),
        ag.stack([m[0][2] - m[2][0], m[0][1] + m[1][0], one - m[0][0] + m[1][1] - m[2][2], m[1][2] + m[2][1]], -1),
        ag.stack([m[1][0] - m[0][1], m[0][2] + m[2][0], m[1][2] + m[2][1], one - m[0][0] - m[1][1] + m[2][2]], -1),
    ]
    q = cands[3]
    for k in (2, 1, 0):
        q = ag.where((pick == k)[..., None], cands[k], q)
    q = ag.normalize(q)
    sign = np.where(q.data[..., :1] < 0, -1.0, 1.0)
    return q * sign


def to_quaternion(out, representation, n_segments):
    """Decode a head output ``[B, S * width]`` into quaternions ``[B, S, 4]``."""
    try:
        width = WIDTH[representation]
    except KeyError:
        raise ContractError(f"unknown output representation {representation!r}") from None
    out = out.reshape(out.shape[:-1] + (n_segments, width))
    if representation == "quaternion":
        return ag.normalize(out)
    if representation == "euler":
        return euler_to_quat(out)
    if representation == "repr6d":
        return repr6d_to_quat(out)
    return ag.exp_map(out)
