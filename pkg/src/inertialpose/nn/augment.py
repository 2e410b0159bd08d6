"""Training-time augmentation of MARG sequence batches.

Four augmentations, each scaled by ``strength`` in [0, 1]:

* additive noise (gaussian or uniform) on every channel,
* sensor dropout: all nine channels of a random sensor zeroed over a span,
* time-step dropout: whole time steps zeroed for every sensor,
* rotation offsets: each sensor's data expressed in a slightly rotated
  frame, with the target rotated to match.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .. import quaternion as Q
from ..errors import ContractError
from .models import SequenceBatch


@dataclass
class AugmentConfig:
    noise: bool = True
    noise_kind: str = "gaussian"  # or "uniform"
    noise_std: tuple = (0.02, 0.02, 0.02)  # accel [g], gyro [rad/s], mag [normalized]
    sensor_dropout: bool = True
    sensor_dropout_prob: float = 0.1  # per sequence and sensor at full strength
    timestep_dropout: bool = True
    timestep_dropout_prob: float = 0.02  # per step at full strength
    rotation: bool = True
    max_rotation_deg: float = 5.0

    def __post_init__(self):
        if self.noise_kind not in ("gaussian", "uniform"):
            raise ContractError(f"unknown noise kind {self.noise_kind!r}")
        self.noise_std = tuple(float(v) for v in self.noise_std)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _noise(marg, cfg, strength, rng):
    scale = np.repeat(np.asarray(cfg.noise_std), 3) * strength
    if cfg.noise_kind == "gaussian":
        n = rng.normal(size=marg.shape)
    else:
        # unit-variance uniform
        n = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=marg.shape)
    return marg + n * scale


def sensor_dropout_mask(shape, prob, rng):
    """Boolean ``[B, T, S]`` mask of zeroed samples; one random span per hit."""
    B, T, S = shape
    mask = np.zeros(shape, dtype=bool)
    hit = rng.random((B, S)) < prob
    for b, s in zip(*np.nonzero(hit)):
        start = int(rng.integers(0, T))
        length = int(rng.integers(1, T - start + 1))
        mask[b, start : start + length, s] = True
    return mask


def rotate_batch(marg, gt, offsets):
    """Express sensor data in frames rotated by ``offsets [B, S, 4]``.

    A sensor whose true orientation is ``q`` now reads as if mounted at
    ``q ⊗ r``; the target becomes ``gt ⊗ r``.
    """
    inv = Q.conjugate(offsets)[:, None, :, :]
    out = marg.copy()
    for k in range(3):
        out[..., 3 * k : 3 * k + 3] = Q.rotate(inv, marg[..., 3 * k : 3 * k + 3])
    new_gt = None if gt is None else Q.multiply_raw(gt, offsets[:, None, :, :])
    return out, new_gt


def augment(batch: SequenceBatch, strength: float, rng, cfg: AugmentConfig | None = None) -> SequenceBatch:
    """Return an augmented copy of ``batch``; ``strength == 0`` is a no-op."""
    if not 0.0 <= strength <= 1.0:
        raise ContractError("augmentation strength must lie in [0, 1]")
    if strength == 0.0:
        return batch
    cfg = cfg or AugmentConfig()
    marg = np.array(batch.marg, dtype=float)
    gt = None if batch.gt is None else np.array(batch.gt, dtype=float)
    B, T, S = marg.shape[:3]
    if cfg.rotation:
        angles = np.radians(cfg.max_rotation_deg) * strength * rng.random((B, S))
        axes = rng.normal(size=(B, S, 3))
        axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
        marg, gt = rotate_batch(marg, gt, Q.from_axis_angle(axes, angles))
    if cfg.noise:
        marg = _noise(marg, cfg, strength, rng)
    if cfg.sensor_dropout:
        marg[sensor_dropout_mask((B, T, S), cfg.sensor_dropout_prob * strength, rng)] = 0.0
    if cfg.timestep_dropout:
        steps = rng.random(T) < cfg.timestep_dropout_prob * strength
        steps[0] = False  # keep the initialization sample
        marg[:, steps] = 0.0
    # cached filter output no longer matches the data
    return replace(batch, marg=marg, gt=gt, filter_q=None, init_q=None)
