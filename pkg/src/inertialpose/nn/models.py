"""Learned fusion architectures on top of the recurrent engine.

* ``model_free``: the network maps all MARG readings straight to segment
  orientations.
* ``complementary``: each step blends the gyro-integrated previous output
  with the network's global orientation using a weight ``alpha`` toward
  the integration branch.
* ``cff_detached``: a classical filter runs on its own; the network sees
  the filter output and the MARG readings and emits a residual rotation
  that left-multiplies the filter quaternion.
* ``cff_feedback``: as above, but the corrected quaternion replaces the
  filter state before the next step. Gradients stop at the filter state.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .. import filters as F
from .. import quaternion as Q
from ..errors import ContractError, DivergenceError
from . import autograd as ag
from .autograd import Tensor
from .layers import Linear, Module, Normalizer, dropout, make_cell
from .rotations import IDENTITY_BIAS, WIDTH, to_quaternion

ARCHITECTURES = ("model_free", "complementary", "cff_detached", "cff_feedback")


@dataclass
class ModelConfig:
    architecture: str = "model_free"
    cell: str = "lstm"
    hidden: list = field(default_factory=lambda: [256, 256])
    n_segments: int = 9
    representation: str | None = None  # default: quaternion, or rotvec for cff
    dropout: float = 0.2
    use_mag: bool = True
    alpha: float = 0.98
    learn_alpha: bool = False
    filter: dict = field(default_factory=lambda: {"kind": "madgwick", "use_mag": True})
    dt: float = 1.0 / 60.0
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ContractError(f"unknown architecture {self.architecture!r}")
        if self.representation is None:
            self.representation = "rotvec" if self.is_cff else "quaternion"
        if self.representation not in WIDTH:
            raise ContractError(f"unknown representation {self.representation!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")
        self.hidden = [int(h) for h in self.hidden]
        if not self.hidden:
            raise ContractError("at least one recurrent layer is required")
        if self.is_cff:
            self.filter = dict(self.filter)
            self.filter.setdefault("use_mag", self.use_mag)
            self.filter.setdefault("dt", self.dt)

    @property
    def is_cff(self):
        return self.architecture.startswith("cff")

    @property
    def channels_per_sensor(self):
        return 9 if self.use_mag else 6

    @property
    def n_features(self):
        per = self.channels_per_sensor + (4 if self.is_cff else 0)
        return self.n_segments * per

    def filter_config(self):
        return F.FilterConfig(**self.filter)

    def to_dict(self):
        return asdict(self)


@dataclass
class SequenceBatch:
    """Equal-length sequences: ``marg [B, T, S, 9]``, ``gt [B, T, S, 4]``.

    ``filter_q`` caches a detached filter's output; ``init_q`` seeds the
    complementary integration (TRIAD of the first sample when omitted).
    """

    marg: np.ndarray
    gt: np.ndarray | None = None
    filter_q: np.ndarray | None = None
    init_q: np.ndarray | None = None

    @property
    def shape(self):
        return self.marg.shape[:3]

    def select(self, idx):
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return SequenceBatch(self.marg[idx], pick(self.gt), pick(self.filter_q), pick(self.init_q))

    def window(self, start, stop):
        sl = lambda a: None if a is None else a[:, start:stop]  # noqa: E731
        return SequenceBatch(self.marg[:, start:stop], sl(self.gt), sl(self.filter_q), None)


class DivergenceMonitor:
    """Abort when the mean QAD over the last ``window`` steps exceeds ``threshold_deg``."""

    def __init__(self, threshold_deg=150.0, window=60):
        self.threshold = np.radians(threshold_deg)
        self.window = window
        self.values = deque(maxlen=window)
        self.step = 0

    def update(self, pred, gt):
        if not np.all(np.isfinite(pred)):
            raise DivergenceError("non-finite orientation", {"step": self.step})
        self.values.append(float(np.mean(Q.qad(gt, pred))))
        self.step += 1
        if len(self.values) == self.window:
            mean = float(np.mean(self.values))
            if mean > self.threshold:
                raise DivergenceError(
                    f"mean QAD {np.degrees(mean):.1f} deg over {self.window} steps exceeds "
                    f"{np.degrees(self.threshold):.0f} deg",
                    {"step": self.step, "mean_qad_deg": np.degrees(mean), "window": self.window},
                )


def initial_orientation(accel, mag, use_mag=True):
    """TRIAD (or tilt-only) attitude per element; identity where degenerate."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return F.init_state(accel, mag, F.FilterConfig(kind="integral", use_mag=use_mag)).q


class FusionModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        sizes = [cfg.n_features] + cfg.hidden
        self.cells = [make_cell(cfg.cell, a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        width = WIDTH[cfg.representation]
        self.head = Linear(cfg.hidden[-1], cfg.n_segments * width, rng)
        if cfg.is_cff:
            # residual starts as the identity rotation
            self.head.W.data[:] = 0.0
            self.head.b.data[:] = np.tile(IDENTITY_BIAS[cfg.representation], cfg.n_segments)
        self.alpha = Tensor(np.array(cfg.alpha), requires_grad=cfg.learn_alpha and cfg.architecture == "complementary", name="alpha")
        self.normalizer = Normalizer(cfg.n_features)

    # ------------------------------------------------------------------
    def _check_batch(self, batch):
        if batch.marg.ndim != 4 or batch.marg.shape[-1] != 9:
            raise ContractError(f"marg must be [B, T, S, 9], got {batch.marg.shape}")
        if batch.marg.shape[2] != self.cfg.n_segments:
            raise ContractError(f"model expects {self.cfg.n_segments} sensors, got {batch.marg.shape[2]}")

    def sensor_features(self, marg):
        m = marg if self.cfg.use_mag else marg[..., :6]
        return m.reshape(m.shape[:-2] + (-1,))

    def features(self, marg, filter_q=None):
        """Raw (unnormalized) network inputs ``[..., n_features]``."""
        f = self.sensor_features(marg)
        if self.cfg.is_cff:
            fq = Q.positive_hemisphere(filter_q)
            f = np.concatenate([fq.reshape(fq.shape[:-2] + (-1,)), f], axis=-1)
        return f

    def fit_normalizer(self, batches):
        """Fit input statistics on training batches (with cached filter output)."""
        feats = []
        for b in batches:
            fq = b.filter_q
            if self.cfg.is_cff and fq is None:
                fq = self.run_filter(b.marg)
            feats.append(self.features(b.marg, fq).reshape(-1, self.cfg.n_features))
        self.normalizer.fit(np.concatenate(feats, axis=0))

    def run_filter(self, marg):
        cfg = self.cfg.filter_config()
        tm = np.moveaxis(marg, 1, 0)  # [T, B, S, 9]
        res = F.run_filter(tm[..., 0:3], tm[..., 3:6], tm[..., 6:9], cfg)
        return np.moveaxis(res.quaternions, 0, 1)

    def initial_state(self, batch_size):
        return [c.zero_state(batch_size) for c in self.cells]

    def _network_step(self, x, states, training, rng):
        new_states = []
        for cell, st in zip(self.cells, states):
            h, st = cell(x, st)
            new_states.append(st)
            x = dropout(ag.relu(h), self.cfg.dropout, rng, training)
        out = self.head(x)
        return to_quaternion(out, self.cfg.representation, self.cfg.n_segments), new_states

    # ------------------------------------------------------------------
    def forward(self, batch, training=False, rng=None, monitor=None):
        """Predicted orientations ``[B, T, S, 4]`` as a tensor."""
        self._check_batch(batch)
        self.check_finite()
        if training and rng is None:
            raise ContractError("training mode needs an rng for dropout")
        arch = self.cfg.architecture
        if arch == "model_free":
            return self._forward_model_free(batch, training, rng, monitor)
        if arch == "complementary":
            return self._forward_complementary(batch, training, rng, monitor)
        if arch == "cff_detached":
            return self._forward_cff_detached(batch, training, rng, monitor)
        return self._forward_cff_feedback(batch, training, rng, monitor)

    def _inputs(self, batch, filter_q=None):
        return self.normalizer(self.features(batch.marg, filter_q)).data

    def _monitor(self, monitor, q, batch, t):
        if monitor is not None and batch.gt is not None:
            monitor.update(q, batch.gt[:, t])

    def _forward_model_free(self, batch, training, rng, monitor):
        B, T, _ = batch.shape
        x = self._inputs(batch)
        states = self.initial_state(B)
        outs = []
        for t in range(T):
            q, states = self._network_step(Tensor(x[:, t]), states, training, rng)
            self._monitor(monitor, q.data, batch, t)
            outs.append(q)
        return ag.stack(outs, axis=1)

    def _forward_complementary(self, batch, training, rng, monitor):
        B, T, _ = batch.shape
        x = self._inputs(batch)
        gyro = np.clip(batch.marg[..., 3:6], -Q.DEFAULT_GYRO_SATURATION, Q.DEFAULT_GYRO_SATURATION)
        steps = Q.exp_map(gyro * self.cfg.dt)
        init = batch.init_q
        if init is None:
            init = initial_orientation(batch.marg[:, 0, :, 0:3], batch.marg[:, 0, :, 6:9], self.cfg.use_mag)
        alpha = ag.clip(self.alpha, 0.0, 1.0)
        states = self.initial_state(B)
        prev = Tensor(init)
        outs = []
        for t in range(T):
            q_int = prev if t == 0 else ag.qmul(prev, steps[:, t])
            q_nn, states = self._network_step(Tensor(x[:, t]), states, training, rng)
            sign = np.where(np.sum(q_int.data * q_nn.data, axis=-1, keepdims=True) < 0, -1.0, 1.0)
            prev = ag.normalize(q_int * alpha + (q_nn * sign) * (1.0 - alpha))
            self._monitor(monitor, prev.data, batch, t)
            outs.append(prev)
        return ag.stack(outs, axis=1)

    def _forward_cff_detached(self, batch, training, rng, monitor):
        B, T, _ = batch.shape
        fq = batch.filter_q if batch.filter_q is not None else self.run_filter(batch.marg)
        x = self._inputs(batch, fq)
        states = self.initial_state(B)
        outs = []
        for t in range(T):
            r, states = self._network_step(Tensor(x[:, t]), states, training, rng)
            q = ag.normalize(ag.qmul(r, fq[:, t]))
            self._monitor(monitor, q.data, batch, t)
            outs.append(q)
        return ag.stack(outs, axis=1)

    def _forward_cff_feedback(self, batch, training, rng, monitor):
        B, T, _ = batch.shape
        fcfg = self.cfg.filter_config()
        marg = batch.marg
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            state = F.init_state(marg[:, 0, :, 0:3], marg[:, 0, :, 6:9], fcfg)
        states = self.initial_state(B)
        outs = []
        for t in range(T):
            if t > 0:
                state.q = np.array(outs[-1].data)
                state = F.step(state, marg[:, t, :, 0:3], marg[:, t, :, 3:6], marg[:, t, :, 6:9], fcfg)
            x = self.normalizer(self.features(marg[:, t], state.q)).data
            r, states = self._network_step(Tensor(x), states, training, rng)
            q = ag.normalize(ag.qmul(r, state.q))
            self._monitor(monitor, q.data, batch, t)
            outs.append(q)
        return ag.stack(outs, axis=1)

    # ------------------------------------------------------------------
    def predict(self, batch, monitor=None):
        """Eval-mode forward without building a graph; returns an array."""
        with ag.no_grad():
            return self.forward(batch, training=False, monitor=monitor).data

    def predict_trial(self, trial, monitor=None):
        batch = SequenceBatch(trial.marg()[None], None if trial.gt is None else trial.gt[None])
        return self.predict(batch, monitor=monitor)[0]

    def clone(self):
        other = FusionModel(replace(self.cfg))
        for (_, dst), (_, src) in zip(other.parameters(), self.parameters()):
            dst.data = src.data.copy()
        other.alpha.data = self.alpha.data.copy()
        other.normalizer.mean = self.normalizer.mean.copy()
        other.normalizer.std = self.normalizer.std.copy()
        return other

    def state_arrays(self):
        out = {name: p.data for name, p in self.parameters()}
        out["alpha"] = self.alpha.data
        out["normalizer.mean"] = self.normalizer.mean
        out["normalizer.std"] = self.normalizer.std
        return out

    def load_arrays(self, arrays):
        for name, p in self.parameters():
            if arrays[name].shape != p.data.shape:
                raise ContractError(f"shape mismatch for {name}")
            p.data = np.array(arrays[name], dtype=float)
        self.alpha.data = np.array(arrays["alpha"], dtype=float)
        self.normalizer.mean = np.array(arrays["normalizer.mean"], dtype=float)
        self.normalizer.std = np.array(arrays["normalizer.std"], dtype=float)


def model_free_forward(model, trial):
    if model.cfg.architecture != "model_free":
        raise ContractError("model is not model-free")
    return model.predict_trial(trial)


def complementary_forward(model, trial):
    if model.cfg.architecture != "complementary":
        raise ContractError("model is not complementary")
    return model.predict_trial(trial)


def cff_forward(model, trial, monitor=None):
    if not model.cfg.is_cff:
        raise ContractError("model is not a filter-residual hybrid")
    return model.predict_trial(trial, monitor=monitor)


class StreamingFusion:
    """Sample-by-sample inference used for latency measurement."""

    def __init__(self, model, first_accel, first_mag):
        self.model = model
        cfg = model.cfg
        self.states = model.initial_state(1)
        self.t = 0
        self.prev = None
        if cfg.is_cff:
            self.fcfg = cfg.filter_config()
            self.fstate = F.init_state(first_accel[None], first_mag[None], self.fcfg)
        elif cfg.architecture == "complementary":
            self.prev = initial_orientation(first_accel[None], first_mag[None], cfg.use_mag)

    def step(self, accel, gyro, mag):
        m = self.model
        cfg = m.cfg
        marg = np.concatenate([accel, gyro, mag], axis=-1)[None]
        with ag.no_grad():
            if cfg.is_cff:
                if self.t > 0:
                    if cfg.architecture == "cff_feedback":
                        self.fstate.q = self.prev
                    self.fstate = F.step(self.fstate, accel[None], gyro[None], mag[None], self.fcfg)
                x = m.normalizer(m.features(marg, self.fstate.q)).data
                r, self.states = m._network_step(Tensor(x), self.states, False, None)
                q = Q.normalize(Q.multiply_raw(r.data, self.fstate.q))
            else:
                x = m.normalizer(m.sensor_features(marg)).data
                q_nn, self.states = m._network_step(Tensor(x), self.states, False, None)
                q = q_nn.data
                if cfg.architecture == "complementary":
                    q_int = self.prev if self.t == 0 else Q.integrate_gyro(self.prev, gyro[None], cfg.dt)
                    a = float(np.clip(m.alpha.data, 0, 1))
                    sign = np.where(np.sum(q_int * q, axis=-1, keepdims=True) < 0, -1.0, 1.0)
                    q = Q.normalize(a * q_int + (1 - a) * sign * q)
        self.prev = q
        self.t += 1
        return q[0]
