"""Trial data model, CSV parsing/writing and the preprocessing pipeline.

Trial CSV schema (version 1)::

    # inertialpose-trial,version=1,subject=S01,kind=task,sensors=2,accel_unit=g,...
    t,s0_ax,s0_ay,s0_az,s0_gx,s0_gy,s0_gz,s0_mx,s0_my,s0_mz,s1_ax,...

The first line is a metadata header of ``key=value`` pairs. The second
line names the columns: time in seconds, then nine channels per sensor in
the fixed order accel (x, y, z), gyro (x, y, z), mag (x, y, z). Missing
readings are written as empty cells or ``nan``. Floats use ``%.17g`` so a
write/read cycle is bit exact.

Trajectory CSV (fusion output and ground truth) is long format with the
columns ``t,segment_id,w,x,y,z`` and one row per (time, segment).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import stats as sps

from . import quaternion as Q
from .errors import ContractError, ParseError, TrialRejected

SCHEMA_NAME = "inertialpose-trial"
SCHEMA_VERSION = 1
TRAJ_COLUMNS = ["t", "segment_id", "w", "x", "y", "z"]
CHANNELS = ["ax", "ay", "az", "gx", "gy", "gz", "mx", "my", "mz"]
TRIAL_KINDS = ("calibration", "validation", "task", "circuit", "sequence", "random")
TRAIN_KINDS = ("task", "circuit", "sequence", "random")
STANDARD_GRAVITY = 9.80665
DEFAULT_RATE = 60.0


class MargSample(NamedTuple):
    """Readings of every sensor at one timestep; arrays are ``[S, 3]``."""

    timestamp: float
    accel: np.ndarray
    gyro: np.ndarray
    mag: np.ndarray


@dataclass
class Trial:
    """A recording of ``S`` MARG sensors over ``T`` timesteps.

    ``accel``, ``gyro`` and ``mag`` are ``[T, S, 3]``; ``gt`` (optional)
    holds ground-truth segment orientations ``[T, S, 4]``.
    """

    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray
    mag: np.ndarray
    subject: str = "S00"
    kind: str = "task"
    gt: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        for name in ("accel", "gyro", "mag"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 3 or arr.shape[-1] != 3:
                raise ContractError(f"{name} must be [T, S, 3], got {arr.shape}")
            if arr.shape[0] != self.t.shape[0]:
                raise ContractError(f"{name} length {arr.shape[0]} != {self.t.shape[0]} timestamps")
            setattr(self, name, arr)
        if not (self.accel.shape == self.gyro.shape == self.mag.shape):
            raise ContractError("accel/gyro/mag shapes differ")
        if self.gt is not None:
            self.gt = np.asarray(self.gt, dtype=float)
            if self.gt.shape != self.accel.shape[:2] + (4,):
                raise ContractError(f"gt shape {self.gt.shape} does not match samples {self.accel.shape[:2]}")
        if self.kind not in TRIAL_KINDS:
            raise ContractError(f"unknown trial kind {self.kind!r}")
        self.meta = dict(self.meta)
        self.meta.setdefault("accel_unit", "g")
        self.meta.setdefault("mag_normalized", False)
        self.meta.setdefault("trimmed", False)

    @property
    def n_steps(self):
        return self.t.shape[0]

    @property
    def n_sensors(self):
        return self.accel.shape[1]

    @property
    def rate(self):
        if self.n_steps < 2:
            return float(self.meta.get("rate", DEFAULT_RATE))
        return 1.0 / float(np.median(np.diff(self.t)))

    def sample(self, i):
        return MargSample(float(self.t[i]), self.accel[i], self.gyro[i], self.mag[i])

    def marg(self):
        """Stacked ``[T, S, 9]`` array in accel, gyro, mag order."""
        return np.concatenate([self.accel, self.gyro, self.mag], axis=-1)

    def slice(self, start, stop=None):
        sl = np.s_[start:stop]
        return replace(
            self,
            t=self.t[sl],
            accel=self.accel[sl],
            gyro=self.gyro[sl],
            mag=self.mag[sl],
            gt=None if self.gt is None else self.gt[sl],
        )

    def select_sensors(self, idx):
        idx = list(idx)
        return replace(
            self,
            accel=self.accel[:, idx],
            gyro=self.gyro[:, idx],
            mag=self.mag[:, idx],
            gt=None if self.gt is None else self.gt[:, idx],
        )


# ---------------------------------------------------------------------------
# CSV IO


def _fmt(x):
    return "nan" if math.isnan(x) else "%.17g" % x


def atomic_write_text(path, text):
    """Write ``text`` via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trial_to_csv(trial):
    meta = {
        "version": SCHEMA_VERSION,
        "subject": trial.subject,
        "kind": trial.kind,
        "sensors": trial.n_sensors,
        "accel_unit": trial.meta["accel_unit"],
        "mag_normalized": int(bool(trial.meta["mag_normalized"])),
        "trimmed": int(bool(trial.meta["trimmed"])),
    }
    for k in sorted(trial.meta):
        if k not in meta and isinstance(trial.meta[k], (str, int, float)) and not isinstance(trial.meta[k], bool):
            meta[k] = trial.meta[k]
    buf = io.StringIO()
    buf.write(SCHEMA_NAME + "," + ",".join(f"{k}={v}" for k, v in meta.items()))
    buf.write("\n")
    cols = ["t"] + [f"s{s}_{c}" for s in range(trial.n_sensors) for c in CHANNELS]
    buf.write("# " + ",".join(cols) + "\n")
    data = trial.marg().reshape(trial.n_steps, -1)
    for ti, row in zip(trial.t, data):
        buf.write(",".join([_fmt(ti)] + [_fmt(v) for v in row]))
        buf.write("\n")
    return "# " + buf.getvalue()


def write_trial(trial, path):
    atomic_write_text(path, trial_to_csv(trial))


def _parse_header(line):
    if not line.startswith("# " + SCHEMA_NAME):
        raise ParseError("line 1: missing trial header")
    meta = {}
    for part in line[2:].strip().split(",")[1:]:
        if "=" not in part:
            raise ParseError(f"line 1: malformed header entry {part!r}")
        k, v = part.split("=", 1)
        meta[k] = v
    try:
        version = int(meta.pop("version"))
    except (KeyError, ValueError):
        raise ParseError("line 1: missing schema version") from None
    if version != SCHEMA_VERSION:
        raise ParseError(f"unknown schema version {version}")
    return meta


def _coerce(v):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def _cell(text, lineno):
    text = text.strip()
    if text == "" or text.lower() == "nan":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"line {lineno}: not a number: {text!r}") from None


def parse_trial_text(text):
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("empty trial file")
    meta = _parse_header(lines[0])
    try:
        n_sensors = int(meta.pop("sensors"))
    except (KeyError, ValueError):
        raise ParseError("line 1: missing sensor count") from None
    if len(lines) < 2:
        raise ParseError("line 2: missing column header")
    ncols = 1 + 9 * n_sensors
    expect = ["t"] + [f"s{s}_{c}" for s in range(n_sensors) for c in CHANNELS]
    if lines[1].lstrip("# ").strip().split(",") != expect:
        raise ParseError("line 2: column header does not match the sensor count")
    rows = []
    for lineno, row in enumerate(csv.reader(lines[2:]), start=3):
        if not row:
            continue
        if len(row) != ncols:
            raise ParseError(f"line {lineno}: expected {ncols} columns, got {len(row)}")
        rows.append([_cell(v, lineno) for v in row])
    if not rows:
        raise ParseError("trial has no samples")
    data = np.array(rows, dtype=float)
    if np.any(np.isnan(data[:, 0])):
        raise ParseError("missing timestamp")
    marg = data[:, 1:].reshape(len(rows), n_sensors, 9)
    subject = str(meta.pop("subject", "S00"))
    kind = str(meta.pop("kind", "task"))
    trial_meta = {k: _coerce(v) for k, v in meta.items()}
    trial_meta["mag_normalized"] = bool(trial_meta.get("mag_normalized", 0))
    trial_meta["trimmed"] = bool(trial_meta.get("trimmed", 0))
    trial_meta["accel_unit"] = str(trial_meta.get("accel_unit", "g"))
    try:
        return Trial(data[:, 0], marg[..., 0:3], marg[..., 3:6], marg[..., 6:9], subject=subject, kind=kind, meta=trial_meta)
    except ContractError as exc:
        raise ParseError(str(exc)) from None


def parse_trial(path, truth_path=None):
    """Read a trial CSV; optionally attach ground truth from a trajectory CSV."""
    with open(path, newline="") as fh:
        trial = parse_trial_text(fh.read())
    if truth_path is not None:
        t, gt = read_trajectory(truth_path)
        if gt.shape[:2] != (trial.n_steps, trial.n_sensors):
            raise ParseError(f"truth shape {gt.shape[:2]} does not match trial")
        trial.gt = gt
    return trial


def trajectory_to_csv(t, quats):
    t = np.asarray(t, dtype=float)
    quats = np.asarray(quats, dtype=float)
    buf = io.StringIO()
    buf.write(",".join(TRAJ_COLUMNS) + "\n")
    for ti, frame in zip(t, quats):
        ts = _fmt(ti)
        for s, q in enumerate(frame):
            buf.write(f"{ts},{s}," + ",".join(_fmt(v) for v in q) + "\n")
    return buf.getvalue()


def write_trajectory(path, t, quats):
    atomic_write_text(path, trajectory_to_csv(t, quats))


def read_trajectory(path):
    """Return ``(t [T], quats [T, S, 4])`` from a long-format trajectory CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRAJ_COLUMNS:
            raise ParseError(f"line 1: expected columns {TRAJ_COLUMNS}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise ParseError(f"line {lineno}: expected 6 columns, got {len(row)}")
            try:
                seg = int(row[1])
            except ValueError:
                raise ParseError(f"line {lineno}: bad segment id {row[1]!r}") from None
            rows.append((_cell(row[0], lineno), seg, *[_cell(v, lineno) for v in row[2:]]))
    if not rows:
        raise ParseError("empty trajectory")
    n_seg = max(r[1] for r in rows) + 1
    if len(rows) % n_seg:
        raise ParseError("trajectory rows are not a whole number of frames")
    arr = np.array(rows, dtype=float).reshape(-1, n_seg, 6)
    if not np.array_equal(arr[:, :, 1], np.broadcast_to(np.arange(n_seg), arr.shape[:2])):
        raise ParseError("segment ids must repeat 0..S-1 within each frame")
    return arr[:, 0, 0], arr[:, :, 2:]


# ---------------------------------------------------------------------------
# Preprocessing


@dataclass
class PreprocessConfig:
    rate: float = DEFAULT_RATE
    trim_seconds: float = 5.0
    max_gap_seconds: float = 1.0
    # m/s^2 input is converted to g when the trial declares it
    normalize_mag: bool = True
    max_abs_accel: float = 50.0  # g; larger values flag corruption
    max_abs_gyro: float = 60.0  # rad/s


def _nan_runs(mask):
    """Yield ``(start, stop)`` of consecutive True runs in a 1-D mask."""
    idx = np.flatnonzero(np.diff(np.concatenate([[0], mask.astype(np.int8), [0]])))
    return list(zip(idx[::2], idx[1::2]))


def _fill_channel(t, y):
    bad = np.isnan(y)
    if not bad.any():
        return y
    good = ~bad
    return np.interp(t, t[good], y[good])


def _slerp_series(t_src, q_src, t_dst):
    """Slerp a ``[T, S, 4]`` quaternion series onto new timestamps."""
    i = np.clip(np.searchsorted(t_src, t_dst, side="right") - 1, 0, len(t_src) - 2)
    span = t_src[i + 1] - t_src[i]
    frac = np.clip((t_dst - t_src[i]) / span, 0.0, 1.0)
    return Q.slerp(q_src[i], q_src[i + 1], frac[:, None])


def _is_uniform(t, rate):
    if len(t) < 2:
        return True
    return np.allclose(np.diff(t), 1.0 / rate, rtol=0, atol=1e-9)


def preprocess(trial, cfg=None):
    """Interpolate gaps, resample to a constant rate, trim, and normalize units.

    Idempotent: flags in ``trial.meta`` record completed steps.
    """
    cfg = cfg or PreprocessConfig()
    t = trial.t
    if len(t) < 2:
        raise TrialRejected("trial too short")
    if np.any(np.diff(t) <= 0):
        raise TrialRejected("timestamps are not strictly increasing")
    marg = trial.marg().copy()
    gt = None if trial.gt is None else trial.gt.copy()

    # gaps: missing rows or runs of missing samples
    if np.max(np.diff(t)) > cfg.max_gap_seconds:
        raise TrialRejected(f"timestamp gap of {np.max(np.diff(t)):.3f} s exceeds {cfg.max_gap_seconds} s")
    flat = marg.reshape(len(t), -1)
    for c in range(flat.shape[1]):
        for a, b in _nan_runs(np.isnan(flat[:, c])):
            lo = t[a - 1] if a > 0 else t[0]
            hi = t[b] if b < len(t) else t[-1]
            if a == 0 or b == len(t) or hi - lo > cfg.max_gap_seconds:
                raise TrialRejected(f"gap in channel {c} from t={t[a]:.3f} s not recoverable")
        flat[:, c] = _fill_channel(t, flat[:, c])
    marg = flat.reshape(marg.shape)
    unit = trial.meta["accel_unit"]
    accel_scale = 1.0 / STANDARD_GRAVITY if unit in ("m/s2", "m/s^2") else 1.0
    if np.nanmax(np.abs(marg[..., 0:3])) * accel_scale > cfg.max_abs_accel or np.nanmax(np.abs(marg[..., 3:6])) > cfg.max_abs_gyro:
        raise TrialRejected("sensor readings outside plausible range (corrupt data)")
    if gt is not None:
        bad = np.isnan(gt).any(axis=-1)
        if bad.any():
            for s in range(gt.shape[1]):
                good = ~bad[:, s]
                if good.sum() < 2:
                    raise TrialRejected("ground truth missing")
                gt[:, s] = _slerp_series(t[good], gt[good, s][:, None], t)[:, 0]

    if not _is_uniform(t, cfg.rate):
        n = int(np.floor((t[-1] - t[0]) * cfg.rate + 1e-9)) + 1
        t_new = t[0] + np.arange(n) / cfg.rate
        flat = marg.reshape(len(t), -1)
        marg = np.stack([np.interp(t_new, t, flat[:, c]) for c in range(flat.shape[1])], axis=-1).reshape((n,) + marg.shape[1:])
        if gt is not None:
            gt = _slerp_series(t, gt, t_new)
        t = t_new

    meta = dict(trial.meta)
    meta["rate"] = cfg.rate
    if not meta["trimmed"] and cfg.trim_seconds > 0:
        start = int(round(cfg.trim_seconds * cfg.rate))
        if start >= len(t):
            raise TrialRejected("trial shorter than the trim window")
        t, marg = t[start:], marg[start:]
        gt = None if gt is None else gt[start:]
        meta["trimmed"] = True

    if accel_scale != 1.0:
        marg[..., 0:3] *= accel_scale
        meta["accel_unit"] = "g"
    if cfg.normalize_mag and not meta["mag_normalized"]:
        mean_norm = float(np.mean(np.linalg.norm(marg[..., 6:9], axis=-1)))
        if mean_norm <= 0:
            raise TrialRejected("magnetometer is all zero")
        marg[..., 6:9] /= mean_norm
        meta["mag_normalized"] = True
        meta["mag_scale"] = mean_norm
    return Trial(t, marg[..., 0:3], marg[..., 3:6], marg[..., 6:9], subject=trial.subject, kind=trial.kind, gt=gt, meta=meta)


# ---------------------------------------------------------------------------
# Statistics and splits


@dataclass
class ModalityStats:
    mean: float
    std: float
    min: float
    max: float
    kurtosis: float
    skewness: float
    degenerate: bool = False


def stream_stats(values):
    """Moments of a flat stream; excess (Fisher) kurtosis."""
    x = np.asarray(values, dtype=float).ravel()
    if x.size == 0:
        raise ContractError("empty stream")
    # np.std of a constant stream can round to ~1e-15, so test equality directly
    if np.all(x == x[0]):
        return ModalityStats(float(x[0]), 0.0, float(x[0]), float(x[0]), 0.0, 0.0, degenerate=True)
    std = float(np.std(x))
    return ModalityStats(
        float(np.mean(x)), std, float(np.min(x)), float(np.max(x)),
        float(sps.kurtosis(x, fisher=True)), float(sps.skew(x)),
    )


def descriptive_stats(trials):
    """Per-modality statistics over all sensors and axes of ``trials``."""
    trials = list(trials)
    if not trials:
        raise ContractError("no trials")
    out = {}
    for name in ("accel", "gyro", "mag"):
        out[name] = stream_stats(np.concatenate([getattr(tr, name).ravel() for tr in trials]))
    return out


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    subjects: dict


def split_by_subject(trials, fractions=(0.7, 0.2, 0.1), seed=0):
    """Subject-disjoint split; calibration/validation trials never enter train."""
    trials = list(trials)
    subjects = sorted({tr.subject for tr in trials})
    n = len(subjects)
    if n < 3:
        raise ContractError(f"need at least 3 subjects, got {n}")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(n)]
    n_val = max(1, int(round(fractions[1] * n)))
    n_test = max(1, int(round(fractions[2] * n)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ContractError("fractions leave no training subject")
    groups = {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train : n_train + n_val]),
        "test": sorted(order[n_train + n_val :]),
    }
    where = {s: g for g, ss in groups.items() for s in ss}
    split = DatasetSplit([], [], [], groups)
    for tr in trials:
        g = where[tr.subject]
        if g == "train" and tr.kind not in TRAIN_KINDS:
            continue
        getattr(split, g).append(tr)
    return split


# ---------------------------------------------------------------------------
# Manifest


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, entries, seed=None, extra=None):
    """``entries``: dicts with at least ``path``; checksums are filled in."""
    root = os.path.dirname(os.path.abspath(path))
    items = []
    for e in entries:
        e = dict(e)
        for key in ("path", "truth"):
            if e.get(key):
                e[key + "_sha256"] = sha256_file(os.path.join(root, e[key]))
        items.append(e)
    doc = {"schema_version": 1, "seed": seed, "trials": items}
    if extra:
        doc.update(extra)
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def read_manifest(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != 1:
        raise ParseError("unknown manifest schema version")
    return doc


def load_manifest_trials(path, verify=True):
    doc = read_manifest(path)
    root = os.path.dirname(os.path.abspath(path))
    trials = []
    for e in doc["trials"]:
        p = os.path.join(root, e["path"])
        if verify and "path_sha256" in e and sha256_file(p) != e["path_sha256"]:
            raise ParseError(f"checksum mismatch for {e['path']}")
        truth = os.path.join(root, e["truth"]) if e.get("truth") else None
        trials.append(parse_trial(p, truth))
    return trials
