"""Synthetic ground-truth trajectories and MARG signals.

Used as the independent oracle for filters, learned models and the
acceptance suite. Sensors are ideal apart from the configured
imperfections, so with none configured every reading is an exact
function of the true orientation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import quaternion as Q
from .dataset import Trial
from .errors import ContractError

UP = np.array([0.0, 0.0, 1.0])


@dataclass
class SegmentMotion:
    """Motion of one segment.

    ``kind="sinusoid"``: Euler angles (yaw, pitch, roll) follow
    ``offset + amplitude * sin(2 pi f t + phase)`` per axis.
    ``kind="keyframes"``: ease-in/ease-out slerp between ``keyframes``
    given as ``[(time, [w, x, y, z]), ...]``.
    ``kind="static"``: constant ``base`` orientation.
    """

    kind: str = "static"
    amplitude: tuple = (0.0, 0.0, 0.0)
    frequency: tuple = (0.0, 0.0, 0.0)
    phase: tuple = (0.0, 0.0, 0.0)
    offset: tuple = (0.0, 0.0, 0.0)
    keyframes: list = field(default_factory=list)
    base: tuple = (1.0, 0.0, 0.0, 0.0)


@dataclass
class MagPulse:
    """World-frame field disturbance that scales ``|mag|`` by ``factor``."""

    start: float
    duration: float
    factor: float = 2.0
    direction: tuple = (0.0, 1.0, 0.0)


@dataclass
class Imperfections:
    gyro_bias: object = 0.0  # scalar, [3] or [S, 3] rad/s
    accel_noise: float = 0.0  # g
    gyro_noise: float = 0.0  # rad/s
    mag_noise: float = 0.0  # normalized units
    sts_offsets: object = None  # [S, 4] sensor-in-segment rotations
    mag_pulses: list = field(default_factory=list)
    linear_accel: float = 0.0  # g amplitude of world-frame linear acceleration
    linear_accel_freq: float = 0.5  # Hz


@dataclass
class SynthConfig:
    duration: float = 10.0
    rate: float = 60.0
    segments: list = field(default_factory=lambda: [SegmentMotion()])
    imperfections: Imperfections = field(default_factory=Imperfections)
    mag_dip: float = 0.0  # radians below horizontal
    seed: int = 0
    subject: str = "S00"
    kind: str = "task"

    def __post_init__(self):
        if not self.rate > 0:
            raise ContractError("rate must be positive")
        if self.duration <= 0:
            raise ContractError("duration must be positive")
        imp = self.imperfections
        if min(imp.accel_noise, imp.gyro_noise, imp.mag_noise) < 0:
            raise ContractError("noise sigma must be non-negative")
        for p in imp.mag_pulses:
            if p.start < 0 or p.start + p.duration > self.duration:
                raise ContractError("magnetic pulse outside the trial duration")

    @property
    def n_steps(self):
        return int(round(self.duration * self.rate))

    @property
    def n_segments(self):
        return len(self.segments)

    def times(self):
        return np.arange(self.n_steps) / self.rate

    def north(self):
        return np.array([np.cos(self.mag_dip), 0.0, -np.sin(self.mag_dip)])

    # JSON round trip --------------------------------------------------
    def to_dict(self):
        d = asdict(self)
        offs = self.imperfections.sts_offsets
        d["imperfections"]["sts_offsets"] = None if offs is None else np.asarray(offs, dtype=float).tolist()
        d["imperfections"]["gyro_bias"] = np.asarray(self.imperfections.gyro_bias, dtype=float).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        segs = [SegmentMotion(**{k: (tuple(v) if isinstance(v, list) and k != "keyframes" else v) for k, v in s.items()}) for s in d.pop("segments", [{}])]
        imp = dict(d.pop("imperfections", {}))
        imp["mag_pulses"] = [MagPulse(**p) for p in imp.get("mag_pulses", [])]
        return cls(segments=segs, imperfections=Imperfections(**imp), **d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _smoothstep(u):
    return u * u * (3.0 - 2.0 * u)


def _segment_truth(motion, t):
    if motion.kind == "static":
        return np.broadcast_to(Q.normalize(np.asarray(motion.base, dtype=float)), (len(t), 4)).copy()
    if motion.kind == "sinusoid":
        amp, freq, ph, off = (np.asarray(v, dtype=float) for v in (motion.amplitude, motion.frequency, motion.phase, motion.offset))
        ang = off + amp * np.sin(2 * np.pi * freq * t[:, None] + ph)
        return Q.euler_to_quat(ang[:, 0], ang[:, 1], ang[:, 2])
    if motion.kind == "keyframes":
        if len(motion.keyframes) < 2:
            raise ContractError("keyframe motion needs at least two keyframes")
        kt = np.array([k[0] for k in motion.keyframes], dtype=float)
        kq = Q.normalize(np.array([k[1] for k in motion.keyframes], dtype=float))
        if np.any(np.diff(kt) <= 0):
            raise ContractError("keyframe times must increase")
        i = np.clip(np.searchsorted(kt, t, side="right") - 1, 0, len(kt) - 2)
        u = np.clip((t - kt[i]) / (kt[i + 1] - kt[i]), 0.0, 1.0)
        return Q.slerp(kq[i], kq[i + 1], _smoothstep(u))
    raise ContractError(f"unknown motion kind {motion.kind!r}")


def generate_truth(cfg):
    """Segment orientations ``[T, S, 4]`` sampled at ``cfg.rate``."""
    t = cfg.times()
    return np.stack([_segment_truth(m, t) for m in cfg.segments], axis=1)


def body_rates(quats, dt):
    """Body-frame angular velocity consistent with exponential-map integration.

    ``omega[t]`` carries ``quats[t-1]`` onto ``quats[t]``; ``omega[0]``
    repeats ``omega[1]``.
    """
    rel = Q.multiply_raw(Q.conjugate(quats[:-1]), quats[1:])
    omega = Q.log_map(rel) / dt
    return np.concatenate([omega[:1], omega], axis=0)


def _pulse_vector(north, pulse):
    u = np.asarray(pulse.direction, dtype=float)
    u = u / np.linalg.norm(u)
    nu = float(north @ u)
    disc = nu * nu - north @ north + (pulse.factor * np.linalg.norm(north)) ** 2
    if disc < 0:
        raise ContractError("pulse factor unreachable along the given direction")
    return (-nu + np.sqrt(disc)) * u


def synthesize_marg(truth, cfg):
    """Simulate the MARG readings of sensors attached to the ``truth`` segments."""
    truth = np.asarray(truth, dtype=float)
    n, s = truth.shape[:2]
    t = np.arange(n) / cfg.rate
    dt = 1.0 / cfg.rate
    imp = cfg.imperfections
    rng = np.random.default_rng(cfg.seed)

    sensor_q = truth
    if imp.sts_offsets is not None:
        offsets = Q.normalize(np.broadcast_to(np.asarray(imp.sts_offsets, dtype=float), (s, 4)))
        sensor_q = Q.normalize(Q.multiply_raw(truth, offsets[None]))
    inv = Q.conjugate(sensor_q)

    gyro = body_rates(sensor_q, dt)
    up = np.broadcast_to(UP, (n, s, 3))
    if imp.linear_accel > 0:
        phases = rng.uniform(0, 2 * np.pi, size=(s, 3))
        lin = imp.linear_accel * np.sin(2 * np.pi * imp.linear_accel_freq * t[:, None, None] + phases)
        up = up + lin
    accel = Q.rotate(inv, up)

    field_w = np.broadcast_to(cfg.north(), (n, s, 3)).copy()
    for p in imp.mag_pulses:
        on = (t >= p.start) & (t < p.start + p.duration)
        field_w[on] += _pulse_vector(cfg.north(), p)
    mag = Q.rotate(inv, field_w)

    gyro = gyro + np.broadcast_to(np.asarray(imp.gyro_bias, dtype=float), (s, 3))
    if imp.accel_noise > 0:
        accel = accel + rng.normal(0.0, imp.accel_noise, accel.shape)
    if imp.gyro_noise > 0:
        gyro = gyro + rng.normal(0.0, imp.gyro_noise, gyro.shape)
    if imp.mag_noise > 0:
        mag = mag + rng.normal(0.0, imp.mag_noise, mag.shape)
    meta = {"rate": cfg.rate, "mag_normalized": True, "seed": cfg.seed}
    return Trial(t, accel, gyro, mag, subject=cfg.subject, kind=cfg.kind, gt=truth.copy(), meta=meta)


def make_trial(cfg):
    """Shortcut for ``synthesize_marg(generate_truth(cfg), cfg)``."""
    return synthesize_marg(generate_truth(cfg), cfg)


def random_motion(n_segments, rng, max_amplitude=0.6, max_frequency=0.4, min_frequency=0.05):
    """Smooth random sinusoidal motions, one per segment."""
    motions = []
    for _ in range(n_segments):
        motions.append(
            SegmentMotion(
                kind="sinusoid",
                amplitude=tuple(rng.uniform(0.1, 1.0, 3) * max_amplitude),
                frequency=tuple(rng.uniform(min_frequency, max_frequency, 3)),
                phase=tuple(rng.uniform(0, 2 * np.pi, 3)),
            )
        )
    return motions


def offset_quaternions(n_sensors, angle_deg, rng):
    """Rotations of exactly ``angle_deg`` about random axes."""
    axes = rng.normal(size=(n_sensors, 3))
    return Q.from_axis_angle(axes, np.full(n_sensors, np.radians(angle_deg)))
