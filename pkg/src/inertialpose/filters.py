"""Classical per-segment orientation filters and the whole-body orchestrator.

Every step function accepts arrays with arbitrary leading dimensions, so a
single call advances all segments (and batches) at once. The prediction is
always the exact exponential-map gyro update; filters differ only in the
correction applied afterwards. With zero correction gain a filter therefore
reproduces :func:`step_integral` bit for bit.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import quaternion as Q
from .calibration import tilt_only, triad
from .errors import ContractError, DegenerateGeometryError

KINDS = ("integral", "mahony", "madgwick", "madgwick_magreject", "ekf")
_EPS = 1e-12


@dataclass
class FilterConfig:
    kind: str = "madgwick"
    use_mag: bool = True
    beta: float = 0.1
    kp: float = 1.0
    ki: float = 0.1
    ekf_gyro_noise: float = 0.02  # rad/s
    ekf_accel_noise: float = 0.1  # normalized direction units
    ekf_mag_noise: float = 0.2
    mag_band: tuple = (0.7, 1.3)
    dt: float = 1.0 / 60.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown filter kind {self.kind!r}")
        if min(self.beta, self.kp, self.ki) < 0:
            raise ContractError("filter gains must be non-negative")
        if min(self.ekf_gyro_noise, self.ekf_accel_noise, self.ekf_mag_noise) < 0:
            raise ContractError("noise levels must be non-negative")
        lo, hi = self.mag_band
        if not lo < hi:
            raise ContractError("mag band min must be below max")
        if not self.dt > 0:
            raise ContractError("dt must be positive")
        self.mag_band = (float(lo), float(hi))

    def to_dict(self):
        d = asdict(self)
        d["mag_band"] = list(self.mag_band)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class FilterState:
    q: np.ndarray
    integral: np.ndarray | None = None
    P: np.ndarray | None = None
    fallback: np.ndarray | None = None  # per-element TRIAD fallback flags
    covariance_resets: int = 0


# ---------------------------------------------------------------------------
# measurement models


def _row_jacobians(q):
    """First and third rows of R(q) with their Jacobians w.r.t. q.

    ``R^T [0, 0, 1]`` equals the third row; ``R^T [bx, 0, bz]`` is
    ``bx * row0 + bz * row2``.
    """
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    j0 = np.stack(
        [
            np.stack([zero, zero, -4 * y, -4 * z], -1),
            np.stack([-2 * z, 2 * y, 2 * x, -2 * w], -1),
            np.stack([2 * y, 2 * z, 2 * w, 2 * x], -1),
        ],
        -2,
    )
    j2 = np.stack(
        [
            np.stack([-2 * y, 2 * z, -2 * w, 2 * x], -1),
            np.stack([2 * x, 2 * w, 2 * z, 2 * y], -1),
            np.stack([zero, -4 * x, -4 * y, zero], -1),
        ],
        -2,
    )
    return row0, row2, j0, j2


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    ok = n[..., 0] > _EPS
    return v / np.where(n > _EPS, n, 1.0), ok


def _earth_field(q, m_unit):
    """Horizontal/vertical decomposition of the measured field in the world frame."""
    h = Q.rotate(q, m_unit)
    return np.sqrt(h[..., 0] ** 2 + h[..., 1] ** 2), h[..., 2]


def _mag_mask(mag, cfg):
    if not cfg.use_mag:
        return np.zeros(mag.shape[:-1], dtype=bool)
    norm = np.linalg.norm(mag, axis=-1)
    mask = norm > _EPS
    if cfg.kind == "madgwick_magreject":
        lo, hi = cfg.mag_band
        mask &= (norm >= lo) & (norm <= hi)
    return mask


def _finite(*arrays):
    ok = None
    for a in arrays:
        f = np.all(np.isfinite(a), axis=-1)
        ok = f if ok is None else ok & f
    return ok


# ---------------------------------------------------------------------------
# init and steps


def init_state(accel, mag, cfg):
    """TRIAD (or gravity-only when ``use_mag`` is off) initial orientation.

    Degenerate geometry (e.g. zero magnetometer) falls back to identity and
    sets ``state.fallback``.
    """
    accel = np.asarray(accel, dtype=float)
    mag = np.asarray(mag, dtype=float)
    shape = accel.shape[:-1]
    q = np.broadcast_to(Q.IDENTITY, shape + (4,)).copy()
    fallback = np.zeros(shape, dtype=bool)
    flat_a = accel.reshape(-1, 3)
    flat_m = mag.reshape(-1, 3)
    flat_q = q.reshape(-1, 4)
    flat_f = fallback.reshape(-1)
    for i in range(flat_a.shape[0]):
        try:
            if not np.all(np.isfinite(flat_a[i])):
                raise DegenerateGeometryError("missing sample")
            if cfg.use_mag:
                flat_q[i] = triad(flat_a[i], flat_m[i])
            else:
                if np.linalg.norm(flat_a[i]) < _EPS:
                    raise DegenerateGeometryError("zero accel")
                flat_q[i] = tilt_only(flat_a[i])
        except DegenerateGeometryError:
            flat_f[i] = True
    if fallback.any():
        warnings.warn(f"TRIAD degenerate for {int(fallback.sum())} sensor(s); using identity", RuntimeWarning, stacklevel=2)
    state = FilterState(q=q, fallback=fallback)
    if cfg.kind == "mahony":
        state.integral = np.zeros(shape + (3,))
    if cfg.kind == "ekf":
        state.P = np.broadcast_to(np.eye(4) * 1e-2, shape + (4, 4)).copy()
    return state


def step_integral(state, gyro, cfg):
    return replace(state, q=Q.integrate_gyro(state.q, gyro, cfg.dt))


def _madgwick_gradient(q, accel, mag, mag_on):
    a, a_ok = _unit(accel)
    row0, row2, j0, j2 = _row_jacobians(q)
    f_g = row2 - a
    grad = np.einsum("...ij,...i->...j", j2, f_g)
    if np.any(mag_on):
        m, _ = _unit(mag)
        bx, bz = _earth_field(q, m)
        f_b = bx[..., None] * row0 + bz[..., None] * row2 - m
        j_b = bx[..., None, None] * j0 + bz[..., None, None] * j2
        grad = grad + np.where(mag_on[..., None], np.einsum("...ij,...i->...j", j_b, f_b), 0.0)
    return grad, a_ok


def step_madgwick(state, accel, gyro, mag, cfg):
    """Gyro prediction followed by one normalized gradient-descent step of size ``beta``."""
    q = Q.integrate_gyro(state.q, gyro, cfg.dt)
    if cfg.beta == 0:
        return replace(state, q=q)
    mag_on = _mag_mask(mag, cfg)
    grad, a_ok = _madgwick_gradient(q, accel, mag, mag_on)
    gn = np.linalg.norm(grad, axis=-1, keepdims=True)
    apply = a_ok & (gn[..., 0] > _EPS)
    step = cfg.beta * cfg.dt * grad / np.where(gn > _EPS, gn, 1.0)
    q_new = Q.normalize(q - step)
    return replace(state, q=np.where(apply[..., None], q_new, q))


def step_madgwick_magreject(state, accel, gyro, mag, cfg):
    """Madgwick update whose magnetometer term is dropped outside ``mag_band``."""
    if cfg.kind != "madgwick_magreject":
        cfg = replace(cfg, kind="madgwick_magreject")
    return step_madgwick(state, accel, gyro, mag, cfg)


def step_mahony(state, accel, gyro, mag, cfg):
    """Proportional-integral feedback of the vector-measurement error."""
    gyro = np.asarray(gyro, dtype=float)
    integral = state.integral if state.integral is not None else np.zeros_like(gyro)
    if cfg.kp == 0 and cfg.ki == 0:
        return replace(state, q=Q.integrate_gyro(state.q, gyro, cfg.dt), integral=integral)
    q = state.q
    a, a_ok = _unit(accel)
    row0, row2, _, _ = _row_jacobians(q)
    err = np.cross(a, row2)
    mag_on = _mag_mask(mag, cfg)
    if np.any(mag_on):
        m, _ = _unit(mag)
        bx, bz = _earth_field(q, m)
        w = bx[..., None] * row0 + bz[..., None] * row2
        err = err + np.where(mag_on[..., None], np.cross(m, w), 0.0)
    err = np.where(a_ok[..., None], err, 0.0)
    integral = integral + cfg.ki * err * cfg.dt
    omega = gyro + cfg.kp * err + integral
    return replace(state, q=Q.integrate_gyro(q, omega, cfg.dt), integral=integral)


def _right_mult_matrix(p):
    """Matrix ``M(p)`` with ``q * p == M(p) @ q``."""
    w, x, y, z = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    return np.stack(
        [
            np.stack([w, -x, -y, -z], -1),
            np.stack([x, w, z, -y], -1),
            np.stack([y, -z, w, x], -1),
            np.stack([z, y, -x, w], -1),
        ],
        -2,
    )


def _xi(q):
    """Jacobian of ``q * (0, v)`` with respect to ``v``."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([-x, -y, -z], -1),
            np.stack([w, -z, y], -1),
            np.stack([z, w, -x], -1),
            np.stack([-y, x, w], -1),
        ],
        -2,
    )


def _symmetrize(P):
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def step_ekf(state, accel, gyro, mag, cfg):
    """Quaternion-state EKF: gyro prediction, gravity/magnetic-field update.

    An infinite measurement noise disables the update entirely.
    """
    gyro = np.clip(np.asarray(gyro, dtype=float), -Q.DEFAULT_GYRO_SATURATION, Q.DEFAULT_GYRO_SATURATION)
    F = _right_mult_matrix(Q.exp_map(gyro * cfg.dt))
    q = Q.integrate_gyro(state.q, gyro, cfg.dt)
    xi = _xi(state.q)
    Qn = (cfg.ekf_gyro_noise * cfg.dt / 2.0) ** 2 * xi @ np.swapaxes(xi, -1, -2)
    P = _symmetrize(F @ state.P @ np.swapaxes(F, -1, -2) + Qn)

    resets = state.covariance_resets
    if np.isfinite(cfg.ekf_accel_noise):
        a, a_ok = _unit(accel)
        row0, row2, j0, j2 = _row_jacobians(q)
        mag_on = _mag_mask(mag, cfg) & np.isfinite(cfg.ekf_mag_noise)
        m, _ = _unit(mag)
        bx, bz = _earth_field(q, m)
        h_m = bx[..., None] * row0 + bz[..., None] * row2
        j_m = bx[..., None, None] * j0 + bz[..., None, None] * j2
        # disabled magnetometer rows get zero innovation and zero Jacobian
        innov = np.concatenate([a - row2, np.where(mag_on[..., None], m - h_m, 0.0)], -1)
        H = np.concatenate([j2, np.where(mag_on[..., None, None], j_m, 0.0)], -2)
        r_mag = cfg.ekf_mag_noise**2 if np.isfinite(cfg.ekf_mag_noise) else 1.0
        R = np.diag([cfg.ekf_accel_noise**2] * 3 + [r_mag] * 3)
        S = H @ P @ np.swapaxes(H, -1, -2) + R
        K = np.swapaxes(np.linalg.solve(S, H @ P), -1, -2)
        dq = np.einsum("...ij,...j->...i", K, innov)
        I_KH = np.eye(4) - K @ H
        P_new = I_KH @ P @ np.swapaxes(I_KH, -1, -2) + K @ R @ np.swapaxes(K, -1, -2)
        q = np.where(a_ok[..., None], Q.normalize(q + dq), q)
        P = np.where(a_ok[..., None, None], _symmetrize(P_new), P)
    try:
        np.linalg.cholesky(P + 1e-15 * np.eye(4))
    except np.linalg.LinAlgError:
        P = np.broadcast_to(np.eye(4) * 1e-1, P.shape).copy()
        resets += 1
    return replace(state, q=q, P=P, covariance_resets=resets)


def step(state, accel, gyro, mag, cfg):
    """Advance ``state`` by one sample using the filter named in ``cfg.kind``."""
    if cfg.kind == "integral":
        return step_integral(state, gyro, cfg)
    if cfg.kind in ("madgwick", "madgwick_magreject"):
        return step_madgwick(state, accel, gyro, mag, cfg)
    if cfg.kind == "mahony":
        return step_mahony(state, accel, gyro, mag, cfg)
    return step_ekf(state, accel, gyro, mag, cfg)


# ---------------------------------------------------------------------------
# whole body


@dataclass
class FusionResult:
    quaternions: np.ndarray  # [T, ..., 4]
    gaps: list = field(default_factory=list)  # (t index, sensor index)
    fallback: np.ndarray | None = None
    covariance_resets: int = 0


def run_filter(accel, gyro, mag, cfg, q0=None):
    """Run a filter over ``[T, ..., 3]`` arrays; returns :class:`FusionResult`.

    Steps with non-finite readings hold the previous orientation and are
    recorded in ``gaps``.
    """
    accel, gyro, mag = (np.asarray(v, dtype=float) for v in (accel, gyro, mag))
    if not (accel.shape == gyro.shape == mag.shape):
        raise ContractError("accel/gyro/mag shapes differ")
    T = accel.shape[0]
    state = init_state(accel[0], mag[0], cfg)
    if q0 is not None:
        state.q = np.broadcast_to(np.asarray(q0, dtype=float), state.q.shape).copy()
    out = np.empty(accel.shape[:-1] + (4,))
    out[0] = state.q
    gaps = [(0, int(i)) for i in np.flatnonzero(state.fallback.reshape(-1))]
    for t in range(1, T):
        ok = _finite(accel[t], gyro[t], mag[t] if cfg.use_mag else gyro[t])
        if ok.all():
            state = step(state, accel[t], gyro[t], mag[t], cfg)
        else:
            a = np.where(ok[..., None], accel[t], 0.0)
            g = np.where(ok[..., None], gyro[t], 0.0)
            m = np.where(ok[..., None], mag[t], 0.0)
            new = step(state, a, g, m, cfg)
            new.q = np.where(ok[..., None], new.q, state.q)
            if new.integral is not None:
                new.integral = np.where(ok[..., None], new.integral, state.integral)
            if new.P is not None:
                new.P = np.where(ok[..., None, None], new.P, state.P)
            state = new
            gaps.extend((t, int(i)) for i in np.flatnonzero(~ok.reshape(-1)))
        out[t] = state.q
    return FusionResult(out, gaps, state.fallback, state.covariance_resets)


def fuse_body(trial, cfg):
    """Independent TRIAD-initialized filter per segment over the whole trial."""
    return run_filter(trial.accel, trial.gyro, trial.mag, cfg)

