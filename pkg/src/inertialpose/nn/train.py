"""Backpropagation-through-time training with AdamW and a warmup-cosine schedule."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..dataset import atomic_write_text
from ..errors import ContractError, DivergenceError
from . import autograd as ag
from .augment import AugmentConfig, augment
from .losses import LOSSES, compute_loss
from .models import DivergenceMonitor, SequenceBatch


@dataclass
class TrainConfig:
    lr: float = 2e-3
    final_lr: float = 1e-5
    epochs: int = 25
    warmup_epochs: int = 2
    batch_size: int = 64
    clip: tuple = (-0.2, 0.2)
    weight_decay: float = 1e-5
    loss: str = "qad"
    window: int | str = "full"
    augment: bool = True
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    divergence_deg: float = 150.0
    divergence_window: int = 60
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentConfig(**self.augmentation)
        self.clip = tuple(float(c) for c in self.clip)
        if len(self.clip) != 2 or not self.clip[0] < self.clip[1]:
            raise ContractError("clip range must satisfy clip_min < clip_max")
        if self.lr <= 0 or self.final_lr <= 0:
            raise ContractError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ContractError("epochs and batch size must be >= 1, warmup >= 0")
        if self.loss not in LOSSES:
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.window != "full":
            if isinstance(self.window, str):
                self.window = int(self.window)
            if self.window < 1:
                raise ContractError("window must be >= 1 or 'full'")

    def to_dict(self):
        d = asdict(self)
        d["clip"] = list(self.clip)
        d["augmentation"] = self.augmentation.to_dict()
        return d


def learning_rate(epoch, cfg: TrainConfig):
    """Linear warmup to the peak, then cosine annealing to ``final_lr`` at the last epoch."""
    last = cfg.epochs - 1
    if last == 0:
        return cfg.lr
    warm = min(cfg.warmup_epochs, last)
    if epoch < warm:
        return cfg.lr * (epoch + 1) / warm
    start = max(warm - 1, 0)
    p = (epoch - start) / (last - start)
    return cfg.final_lr + (cfg.lr - cfg.final_lr) * 0.5 * (1.0 + math.cos(math.pi * p))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]
        self.t = 0

    def step(self, lr, clip=None):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad if clip is None else np.clip(p.grad, clip[0], clip[1])
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = np.asarray(p.data * (1.0 - lr * self.wd) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps))

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_loss, lr, aug_strength)
    status: str = "completed"  # completed | diverged | nonfinite
    best_epoch: int = -1
    best_val: float = math.inf
    message: str = ""

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr", "aug_strength"])
        for r in self.rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
        return buf.getvalue()

    def write_csv(self, path):
        atomic_write_text(path, self.to_csv())


def trial_batch(trials):
    """Stack equal-length trials into one :class:`SequenceBatch`."""
    gt = None if any(t.gt is None for t in trials) else np.stack([t.gt for t in trials])
    return SequenceBatch(np.stack([t.marg() for t in trials]), gt)


def _with_filter(model, batch):
    if model.cfg.architecture == "cff_detached" and batch.filter_q is None:
        batch.filter_q = model.run_filter(batch.marg)
    return batch


def _windows(batch, window):
    T = batch.marg.shape[1]
    if window == "full" or window >= T:
        return [batch]
    return [batch.window(s, s + window) for s in range(0, T - window + 1, window)]


def _group_batches(items, batch_size, rng):
    """Mini-batches of equal-length single-sequence items, shuffled."""
    groups = {}
    for it in items:
        groups.setdefault(it.marg.shape[1], []).append(it)
    out = []
    for length in sorted(groups):
        g = groups[length]
        order = rng.permutation(len(g))
        for i in range(0, len(g), batch_size):
            pick = [g[j] for j in order[i : i + batch_size]]
            out.append(
                SequenceBatch(
                    np.concatenate([p.marg for p in pick]),
                    np.concatenate([p.gt for p in pick]),
                    None if pick[0].filter_q is None else np.concatenate([p.filter_q for p in pick]),
                )
            )
    return [out[i] for i in rng.permutation(len(out))]


def evaluate_loss(model, trials, loss, monitor_factory=None):
    """Mean loss over full trials in eval mode."""
    total, count = 0.0, 0
    with ag.no_grad():
        for t in trials:
            b = _with_filter(model, trial_batch([t]))
            mon = monitor_factory() if monitor_factory else None
            pred = model.forward(b, training=False, monitor=mon)
            total += float(compute_loss(loss, pred, b.gt).data) * t.n_steps
            count += t.n_steps
    return total / count


def train(model, train_trials, val_trials=(), cfg: TrainConfig | None = None, log=None):
    """Fit ``model`` in place; returns ``(model, TrainReport)``.

    The parameters with the lowest validation loss (training loss when no
    validation trials are given) are restored at the end. A non-finite loss
    or a divergence abort stops training with the last good parameters.
    """
    cfg = cfg or TrainConfig()
    train_trials = list(train_trials)
    val_trials = list(val_trials)
    if not train_trials:
        raise ContractError("training set is empty")
    if any(t.gt is None for t in train_trials + val_trials):
        raise ContractError("training and validation trials need ground truth")
    rng = np.random.default_rng(cfg.seed)
    full = [_with_filter(model, trial_batch([t])) for t in train_trials]
    model.fit_normalizer(full)
    params = model.parameters()
    opt = AdamW(params, cfg.weight_decay)
    report = TrainReport()
    best = {n: p.data.copy() for n, p in params}
    monitor_factory = None
    if model.cfg.architecture == "cff_feedback":
        monitor_factory = lambda: DivergenceMonitor(cfg.divergence_deg, cfg.divergence_window)  # noqa: E731

    def restore(state):
        for n, p in params:
            p.data = state[n].copy()

    for epoch in range(cfg.epochs):
        lr = learning_rate(epoch, cfg)
        strength = (epoch + 1) / cfg.epochs if cfg.augment else 0.0
        items = []
        for b in full:
            a = augment(b, strength, rng, cfg.augmentation)
            items.extend(_windows(_with_filter(model, a), cfg.window))
        losses, weights = [], []
        last_good = {n: p.data.copy() for n, p in params}
        try:
            for mb in _group_batches(items, cfg.batch_size, rng):
                opt.zero_grad()
                mon = monitor_factory() if monitor_factory else None
                pred = model.forward(mb, training=True, rng=rng, monitor=mon)
                loss = compute_loss(cfg.loss, pred, mb.gt)
                if not np.isfinite(loss.data):
                    restore(last_good)
                    report.status = "nonfinite"
                    report.message = f"non-finite loss at epoch {epoch}"
                    break
                loss.backward()
                last_good = {n: p.data.copy() for n, p in params}
                opt.step(lr, cfg.clip)
                losses.append(float(loss.data))
                weights.append(mb.marg.shape[0] * mb.marg.shape[1])
            if report.status == "completed":
                train_loss = float(np.average(losses, weights=weights))
                val_loss = evaluate_loss(model, val_trials, cfg.loss, monitor_factory) if val_trials else train_loss
        except DivergenceError as exc:
            restore(last_good)
            report.status = "diverged"
            report.message = str(exc)
        if report.status != "completed":
            break
        report.rows.append((epoch, train_loss, val_loss, lr, strength))
        if log:
            log(f"epoch {epoch}: train {train_loss:.6f} val {val_loss:.6f} lr {lr:.3g}")
        if val_loss < report.best_val:
            report.best_val = val_loss
            report.best_epoch = epoch
            best = {n: p.data.copy() for n, p in params}
    if report.best_epoch >= 0 or report.status == "completed":
        restore(best)
    return model, report
