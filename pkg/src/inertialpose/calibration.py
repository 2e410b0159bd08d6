"""Sensor intrinsics, sensor-to-segment alignment and TRIAD attitude."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from . import quaternion as Q
from .dataset import Trial, atomic_write_text
from .errors import CalibrationError, ContractError, DegenerateGeometryError, ParseError

PROFILE_SCHEMA_VERSION = 1
GRAVITY_REF = np.array([0.0, 0.0, 1.0])
NORTH_REF = np.array([1.0, 0.0, 0.0])

STATIC_GYRO_STD = 0.02  # rad/s
STATIC_ACCEL_TOL = 0.05  # g
NPOSE_SECONDS = 5.0


def _vec3(value, default):
    return np.array(default if value is None else value, dtype=float)


@dataclass
class SensorIntrinsics:
    """Per-axis bias and scale of one sensor (arrays may also be ``[S, 3]``).

    Readings are modelled as ``raw = true * scale + bias``.
    """

    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    mag_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mag_scale: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        for name in ("accel", "gyro", "mag"):
            b = np.asarray(getattr(self, name + "_bias"), dtype=float)
            s = np.asarray(getattr(self, name + "_scale"), dtype=float)
            if np.any(s <= 0) or not np.all(np.isfinite(s)):
                raise ContractError(f"{name} scale factors must be strictly positive")
            setattr(self, name + "_bias", b)
            setattr(self, name + "_scale", s)

    def to_dict(self):
        return {k: np.asarray(v).tolist() for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


def apply_intrinsics(trial, cal):
    """Remove bias and scale: ``(raw - bias) / scale`` per axis and modality."""
    return replace(
        trial,
        accel=(trial.accel - cal.accel_bias) / cal.accel_scale,
        gyro=(trial.gyro - cal.gyro_bias) / cal.gyro_scale,
        mag=(trial.mag - cal.mag_bias) / cal.mag_scale,
    )


def inject_intrinsics(trial, cal):
    """Inverse of :func:`apply_intrinsics`; used to corrupt synthetic data."""
    return replace(
        trial,
        accel=trial.accel * cal.accel_scale + cal.accel_bias,
        gyro=trial.gyro * cal.gyro_scale + cal.gyro_bias,
        mag=trial.mag * cal.mag_scale + cal.mag_bias,
    )


def static_diagnostics(accel=None, gyro=None):
    """Statistics used to decide whether a window is static."""
    diag = {}
    if gyro is not None:
        diag["gyro_std"] = np.std(np.asarray(gyro, dtype=float), axis=0)
    if accel is not None:
        diag["accel_norm_mean"] = np.mean(np.linalg.norm(np.asarray(accel, dtype=float), axis=-1), axis=0)
    return diag


def check_static(accel=None, gyro=None, gyro_std=STATIC_GYRO_STD, accel_tol=STATIC_ACCEL_TOL):
    """Raise :class:`CalibrationError` with per-sensor diagnostics if not static."""
    diag = static_diagnostics(accel, gyro)
    bad = []
    if "gyro_std" in diag:
        moving = np.any(np.atleast_2d(diag["gyro_std"]) >= gyro_std, axis=-1)
        bad.extend(np.flatnonzero(moving).tolist())
    if "accel_norm_mean" in diag:
        off = np.abs(np.atleast_1d(diag["accel_norm_mean"]) - 1.0) > accel_tol
        bad.extend(np.flatnonzero(off).tolist())
    if bad:
        raise CalibrationError(
            f"window is not static for sensors {sorted(set(bad))}",
            {k: np.asarray(v).tolist() for k, v in diag.items()} | {"sensors": sorted(set(bad))},
        )
    return diag


def estimate_gyro_bias(gyro, rate=60.0, max_std=STATIC_GYRO_STD, min_seconds=1.0):
    """Mean gyro reading over a static window ``[N, 3]`` or ``[N, S, 3]``."""
    gyro = np.asarray(gyro, dtype=float)
    if gyro.shape[0] < int(round(min_seconds * rate)):
        raise ContractError(f"static window shorter than {min_seconds} s")
    check_static(gyro=gyro, gyro_std=max_std)
    return gyro.mean(axis=0)


def triad(accel, mag, ref_gravity=GRAVITY_REF, ref_north=NORTH_REF, eps=1e-9):
    """Orientation mapping the reference triad onto the measured one.

    ``accel``/``mag`` are body-frame measurements ``[..., 3]``; the result
    ``q`` satisfies ``rotate(q, accel_dir) == ref_gravity`` exactly, with the
    magnetometer fixing heading.
    """
    a = np.asarray(accel, dtype=float)
    m = np.asarray(mag, dtype=float)

    def basis(v1, v2):
        n1 = np.linalg.norm(v1, axis=-1, keepdims=True)
        c = np.cross(v1, v2)
        nc = np.linalg.norm(c, axis=-1, keepdims=True)
        n2 = np.linalg.norm(v2, axis=-1, keepdims=True)
        if np.any(n1 <= eps) or np.any(n2 <= eps) or np.any(nc <= eps * n1 * n2):
            raise DegenerateGeometryError("TRIAD vectors are zero or parallel")
        t1 = v1 / n1
        t2 = c / nc
        return np.stack([t1, t2, np.cross(t1, t2)], axis=-1)

    body = basis(a, m)
    ref = basis(np.broadcast_to(ref_gravity, a.shape), np.broadcast_to(ref_north, m.shape))
    return Q.from_matrix(ref @ np.swapaxes(body, -1, -2))


def tilt_only(accel, ref_gravity=GRAVITY_REF):
    """Gravity-only attitude with zero heading change (shortest arc)."""
    return Q.shortest_arc(accel, np.broadcast_to(ref_gravity, np.shape(accel)))


def sts_static_npose(accel, expected_mount, gyro=None, check=True):
    """Correct a nominal sensor-to-segment mount in pitch/roll from static data.

    ``accel`` is the sensor-frame window ``[N, 3]`` (or ``[N, S, 3]``) from
    the start of a trial while the subject holds the N-pose, in which every
    segment frame coincides with the NWU world frame. ``expected_mount``
    maps sensor to segment coordinates. The returned mount makes the mean
    specific force point straight up; its heading equals the expected one.
    """
    accel = np.asarray(accel, dtype=float)
    mount = Q.normalize(np.asarray(expected_mount, dtype=float))
    if check:
        check_static(accel=accel, gyro=gyro)
    mean_acc = accel.mean(axis=0)
    in_segment = Q.rotate(mount, mean_acc)
    correction = Q.shortest_arc(in_segment, np.broadcast_to(GRAVITY_REF, in_segment.shape))
    return Q.normalize(Q.multiply_raw(correction, mount))


def apply_mounts(trial, mounts):
    """Rotate sensor-frame readings into segment frames with ``mounts [S, 4]``."""
    mounts = Q.normalize(np.broadcast_to(np.asarray(mounts, dtype=float), (trial.n_sensors, 4)))
    return replace(
        trial,
        accel=Q.rotate(mounts, trial.accel),
        gyro=Q.rotate(mounts, trial.gyro),
        mag=Q.rotate(mounts, trial.mag),
    )


def expected_mounts(preset, path=None):
    """Nominal ``(segment names, mounts [S, 4])`` for a preset from a mounts config.

    ``path`` defaults to the shipped ``data/mounts.json``.
    """
    if path is None:
        doc = json.loads(resources.files("inertialpose").joinpath("data/mounts.json").read_text())
    else:
        with open(path) as fh:
            doc = json.load(fh)
    if preset not in doc or preset.startswith("_"):
        raise ContractError(f"no expected mounts for preset {preset!r}")
    entry = doc[preset]
    mounts = np.asarray(entry["mounts"], dtype=float)
    if mounts.shape != (len(entry["segments"]), 4):
        raise ParseError(f"mounts for {preset!r} do not match its segment list")
    return list(entry["segments"]), Q.normalize(mounts)


def calibrate_trial(trial, expected_mounts, seconds=NPOSE_SECONDS, check=True):
    """Estimate per-sensor mounts from the first ``seconds`` of ``trial``."""
    n = int(round(seconds * trial.rate))
    if trial.n_steps < n:
        raise CalibrationError(f"trial shorter than the {seconds} s N-pose window")
    return sts_static_npose(trial.accel[:n], expected_mounts, gyro=trial.gyro[:n], check=check)


@dataclass
class CalibrationProfile:
    """Per-sensor intrinsics and mount quaternions (JSON persisted)."""

    sensors: list  # names
    intrinsics: SensorIntrinsics
    mounts: np.ndarray

    def to_dict(self):
        return {
            "schema_version": PROFILE_SCHEMA_VERSION,
            "sensors": list(self.sensors),
            "intrinsics": self.intrinsics.to_dict(),
            "mounts": np.asarray(self.mounts, dtype=float).tolist(),
        }

    def save(self, path):
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != PROFILE_SCHEMA_VERSION:
            raise ParseError(f"unsupported calibration profile version {d.get('schema_version')}")
        return cls(d["sensors"], SensorIntrinsics.from_dict(d["intrinsics"]), np.asarray(d["mounts"], dtype=float))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def apply(self, trial: Trial) -> Trial:
        return apply_mounts(apply_intrinsics(trial, self.intrinsics), self.mounts)
