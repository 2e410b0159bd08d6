"""QAD metrics, boxplot/time-series aggregation and per-sample latency benchmarks."""

from __future__ import annotations

import contextlib
import csv
import io
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import filters as F
from . import quaternion as Q
from .errors import ContractError

BOX_FIELDS = ("min", "q1", "median", "q3", "max", "lower_fence", "upper_fence", "whisker_low", "whisker_high", "n_outliers")


def boxplot_stats(values, k=1.5):
    """Quartiles (linear interpolation), ``k``·IQR fences and whisker ends."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ContractError("boxplot of an empty sample")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo, hi = q1 - k * iqr, q3 + k * iqr
    inside = v[(v >= lo) & (v <= hi)]
    return {
        "min": float(v[0]),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(v[-1]),
        "lower_fence": float(lo),
        "upper_fence": float(hi),
        "whisker_low": float(inside[0]),
        "whisker_high": float(inside[-1]),
        "n_outliers": int(v.size - inside.size),
    }


@dataclass
class LatencyStats:
    mean_ms: float
    std_ms: float
    n: int

    def to_dict(self):
        return {"mean_ms": self.mean_ms, "std_ms": self.std_ms, "n": self.n}


@dataclass
class EvalReport:
    mean_deg: float
    std_deg: float
    segments: list
    per_segment_mean: np.ndarray  # [S]
    per_segment_std: np.ndarray
    boxplots: list  # one dict per segment
    series: np.ndarray  # [T, S] degrees
    latency: dict = field(default_factory=dict)  # method -> LatencyStats
    meta: dict = field(default_factory=dict)

    def to_dict(self, include_series=False):
        d = {
            "mean_qad_deg": self.mean_deg,
            "std_qad_deg": self.std_deg,
            "segments": [
                {"name": n, "mean_deg": float(m), "std_deg": float(s), "boxplot": b}
                for n, m, s, b in zip(self.segments, self.per_segment_mean, self.per_segment_std, self.boxplots)
            ],
            "latency": {k: v.to_dict() for k, v in self.latency.items()},
            "meta": self.meta,
        }
        if include_series:
            d["series_deg"] = self.series.tolist()
        return d

    def to_json(self, include_series=False):
        return json.dumps(self.to_dict(include_series), sort_keys=True, indent=2) + "\n"

    def boxplot_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("segment", "mean", "std") + BOX_FIELDS)
        for n, m, s, b in zip(self.segments, self.per_segment_mean, self.per_segment_std, self.boxplots):
            w.writerow([n, repr(float(m)), repr(float(s))] + [repr(b[f]) for f in BOX_FIELDS])
        return buf.getvalue()

    def series_csv(self, t=None):
        T = self.series.shape[0]
        t = np.arange(T) if t is None else np.asarray(t)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + list(self.segments))
        for k in range(T):
            w.writerow([repr(float(t[k]))] + [repr(float(v)) for v in self.series[k]])
        return buf.getvalue()


def qad_deg(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.shape[-1] != 4:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(gt))):
        raise ContractError("non-finite orientations in evaluation input")
    return np.degrees(Q.qad(gt, pred))


def evaluate(pred, gt, segments=None, meta=None):
    """Aggregate QAD over time and segments for ``[T, S, 4]`` trajectories."""
    err = qad_deg(pred, gt)
    if err.ndim != 2:
        raise ContractError("expected [T, S, 4] trajectories")
    S = err.shape[1]
    segments = list(segments) if segments is not None else [f"s{i}" for i in range(S)]
    if len(segments) != S:
        raise ContractError("segment names do not match trajectory width")
    return EvalReport(
        mean_deg=float(err.mean()),
        std_deg=float(err.std()),
        segments=segments,
        per_segment_mean=err.mean(axis=0),
        per_segment_std=err.std(axis=0),
        boxplots=[boxplot_stats(err[:, i]) for i in range(S)],
        series=err,
        meta=dict(meta or {}),
    )


def evaluate_many(pairs, segments=None):
    """Pool several ``(pred, gt)`` trials into one report."""
    preds = np.concatenate([np.asarray(p) for p, _ in pairs])
    gts = np.concatenate([np.asarray(g) for _, g in pairs])
    return evaluate(preds, gts, segments)


# ---------------------------------------------------------------------------
# latency


@contextlib.contextmanager
def single_cpu():
    """Pin the process to one CPU while timing, where the OS allows it."""
    if not hasattr(os, "sched_setaffinity"):
        yield
        return
    old = os.sched_getaffinity(0)
    try:
        os.sched_setaffinity(0, {min(old)})
    except OSError:
        yield
        return
    try:
        yield
    finally:
        os.sched_setaffinity(0, old)


def bench_latency(fn, n_samples, warmup=10, iterations=None, pin=True):
    """Per-call wall time of ``fn(i)`` over sample indices, in milliseconds.

    Samples ``0..warmup-1`` are processed untimed; the next ``iterations``
    (default: the rest of the trial) are timed one call each. With ``pin``
    the process runs on a single CPU during the measurement.
    """
    if iterations is None:
        iterations = n_samples - warmup
    if iterations < 100:
        raise ContractError("latency benchmarks need at least 100 timed iterations")
    if warmup + iterations > n_samples:
        raise ContractError("trial too short for the requested warmup and iterations")
    times = np.empty(iterations)
    clock = time.perf_counter_ns
    with single_cpu() if pin else contextlib.nullcontext():
        for i in range(warmup):
            fn(i)
        for k in range(iterations):
            i = warmup + k
            t0 = clock()
            fn(i)
            times[k] = clock() - t0
    ms = times / 1e6
    return LatencyStats(float(ms.mean()), float(ms.std()), iterations)


def filter_stepper(trial, cfg):
    """Per-sample callable advancing a filter over all sensors of ``trial``."""
    a, g, m = trial.accel, trial.gyro, trial.mag
    state = [F.init_state(a[0], m[0], cfg)]

    def fn(i):
        state[0] = F.step(state[0], a[i], g[i], m[i], cfg)
        return state[0].q

    return fn


def model_stepper(model, trial):
    from .nn.models import StreamingFusion

    a, g, m = trial.accel, trial.gyro, trial.mag
    stream = StreamingFusion(model, a[0], m[0])

    def fn(i):
        return stream.step(a[i], g[i], m[i])

    return fn


# ---------------------------------------------------------------------------
# SVG rendering


def _svg(width, height, body):
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n' + "\n".join(body) + "\n</svg>\n"
    )


def boxplot_svg(report, width=600, height=300):
    S = len(report.segments)
    top = max(max(b["max"] for b in report.boxplots), 1e-9)
    pad, base = 40, height - 40
    scale = (base - 20) / top
    step = (width - pad) / S
    y = lambda v: f"{base - v * scale:.2f}"  # noqa: E731
    body = [f'<line x1="{pad}" y1="{base}" x2="{width}" y2="{base}" stroke="black"/>']
    for i, (name, b) in enumerate(zip(report.segments, report.boxplots)):
        cx = pad + step * (i + 0.5)
        hw = step * 0.3
        body += [
            f'<line x1="{cx:.2f}" y1="{y(b["whisker_low"])}" x2="{cx:.2f}" y2="{y(b["whisker_high"])}" stroke="black"/>',
            f'<rect x="{cx - hw:.2f}" y="{y(b["q3"])}" width="{2 * hw:.2f}" '
            f'height="{(b["q3"] - b["q1"]) * scale:.2f}" fill="#9ecae1" stroke="black"/>',
            f'<line x1="{cx - hw:.2f}" y1="{y(b["median"])}" x2="{cx + hw:.2f}" y2="{y(b["median"])}" stroke="black" stroke-width="2"/>',
            f'<text x="{cx:.2f}" y="{base + 15}" text-anchor="middle">{name}</text>',
        ]
    body.append(f'<text x="5" y="15">QAD [deg], max {top:.2f}</text>')
    return _svg(width, height, body)


def timeplot_svg(report, width=600, height=300):
    T, S = report.series.shape
    top = max(float(report.series.max()), 1e-9)
    pad, base = 40, height - 20
    sx = (width - pad) / max(T - 1, 1)
    sy = (base - 20) / top
    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22"]
    body = [f'<line x1="{pad}" y1="{base}" x2="{width}" y2="{base}" stroke="black"/>']
    for i in range(S):
        pts = " ".join(f"{pad + k * sx:.2f},{base - v * sy:.2f}" for k, v in enumerate(report.series[:, i]))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{palette[i % len(palette)]}" stroke-width="1"/>')
    body.append(f'<text x="5" y="15">QAD [deg], max {top:.2f}</text>')
    return _svg(width, height, body)
