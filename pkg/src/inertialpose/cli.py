"""Command-line interface: ``inertialpose <subcommand> ...``.

Exit codes: 0 success, 1 other failure, 2 usage, 3 parse error, 4 contract
violation, 5 calibration failure, 6 divergence.

Config files are JSON. ``--set key=value`` overrides any field (dotted keys
reach nested dicts; values are parsed as JSON when possible). Relative
config paths that do not exist are looked up in ``$INERTIALPOSE_CONFIG_DIR``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import dataset as D
from . import evaluation as E
from . import filters as F
from . import synthetic as SY
from .calibration import CalibrationProfile, SensorIntrinsics, calibrate_trial, estimate_gyro_bias, expected_mounts
from .errors import CalibrationError, ContractError, DivergenceError, DomainError, ParseError

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_PARSE, EXIT_CONTRACT, EXIT_CALIBRATION, EXIT_DIVERGENCE = 0, 1, 2, 3, 4, 5, 6
CONFIG_ENV = "INERTIALPOSE_CONFIG_DIR"

log = logging.getLogger("inertialpose")


# ---------------------------------------------------------------------------
# config helpers


def resolve_config(path):
    if path is None or os.path.exists(path) or os.path.isabs(path):
        return path
    base = os.environ.get(CONFIG_ENV)
    if base and os.path.exists(os.path.join(base, path)):
        return os.path.join(base, path)
    return path


def load_config(path, sets=(), default_name=None):
    """JSON config (explicit path, or ``$INERTIALPOSE_CONFIG_DIR/<default_name>``) plus overrides."""
    cfg = {}
    path = resolve_config(path)
    if path is None and default_name and os.environ.get(CONFIG_ENV):
        cand = os.path.join(os.environ[CONFIG_ENV], default_name)
        path = cand if os.path.exists(cand) else None
    if path is not None:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        except OSError as exc:
            raise ContractError(f"cannot read config {path}: {exc.strerror}") from None
    for item in sets or ():
        apply_override(cfg, item)
    return cfg


def apply_override(cfg, item):
    if "=" not in item:
        raise ContractError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def _on_off(v):
    return v == "on"


def _floats(text, n=None):
    vals = [float(x) for x in text.split(",")]
    if n is not None and len(vals) != n:
        raise ContractError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _need_file(path, what):
    if path is None or not os.path.isfile(path):
        raise ContractError(f"{what} not found: {path}")
    return path


def _write_json(path, doc):
    D.atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def build_synth_trials(doc, seed=None):
    """Trials described by a synth config; extras: ``n_trials``, ``random_segments``, ``sts_offset_deg``."""
    doc = dict(doc)
    n_trials = int(doc.pop("n_trials", 1))
    n_random = doc.pop("random_segments", None)
    offset_deg = doc.pop("sts_offset_deg", None)
    if seed is not None:
        doc["seed"] = seed
    base = SY.SynthConfig.from_dict(doc)
    rng = np.random.default_rng(base.seed)
    n_seg = int(n_random) if n_random else base.n_segments
    if offset_deg:
        base.imperfections.sts_offsets = SY.offset_quaternions(n_seg, float(offset_deg), rng)
    trials = []
    for i in range(n_trials):
        cfg = SY.SynthConfig.from_dict(base.to_dict())
        cfg.seed = base.seed + i
        if n_trials > 1:
            cfg.subject = f"{base.subject}_{i:03d}"
        if n_random:
            cfg.segments = SY.random_motion(n_seg, rng)
        trials.append(SY.make_trial(cfg))
    return trials


def cmd_synth(args):
    doc = load_config(args.config, args.set, "synth.json")
    trials = build_synth_trials(doc, args.seed)
    os.makedirs(args.out, exist_ok=True)
    entries = []
    for i, tr in enumerate(trials):
        name, truth = f"trial_{i:03d}.csv", f"truth_{i:03d}.csv"
        D.write_trial(tr, os.path.join(args.out, name))
        D.write_trajectory(os.path.join(args.out, truth), tr.t, tr.gt)
        entries.append({"path": name, "truth": truth, "subject": tr.subject, "kind": tr.kind})
    seed = trials[0].meta.get("seed")
    D.write_manifest(os.path.join(args.out, "manifest.json"), entries, seed=seed, extra={"synth": doc})
    log.info("wrote %d trials to %s", len(trials), args.out)


def _load_trial(args):
    tr = D.parse_trial(_need_file(args.input, "input trial"), getattr(args, "truth", None))
    if getattr(args, "profile", None):
        tr = CalibrationProfile.load(_need_file(args.profile, "calibration profile")).apply(tr)
    if getattr(args, "preprocess", False):
        tr = D.preprocess(tr)
    return tr


def _mounts(source, n):
    """Expected mounts and sensor names from a preset name or a JSON file; identity by default."""
    names = [f"s{i}" for i in range(n)]
    if source is None:
        return names, np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    path = resolve_config(source)
    if not os.path.exists(path):
        names, mounts = expected_mounts(source)
    else:
        doc = load_config(path)
        mounts = np.asarray(doc["mounts"] if isinstance(doc, dict) else doc, dtype=float)
        if isinstance(doc, dict) and "segments" in doc:
            names = list(doc["segments"])
    if mounts.shape != (n, 4):
        raise ContractError(f"expected {n} mount quaternions, got shape {mounts.shape}")
    return names, mounts


def cmd_calibrate(args):
    tr = D.parse_trial(_need_file(args.input, "input trial"))
    names, expected = _mounts(args.mounts, tr.n_sensors)
    n = int(round(args.seconds * tr.rate))
    mounts = calibrate_trial(tr, expected, seconds=args.seconds, check=not args.no_check)
    bias = tr.gyro[:n].mean(axis=0) if args.no_check else estimate_gyro_bias(tr.gyro[:n], rate=tr.rate)
    intr = SensorIntrinsics(gyro_bias=bias, gyro_scale=np.ones((tr.n_sensors, 3)))
    prof = CalibrationProfile(names, intr, mounts)
    prof.save(args.out)


def filter_config_from_args(args):
    doc = load_config(args.config, args.set, "filter.json")
    if args.filter:
        doc["kind"] = args.filter
    if args.mag:
        doc["use_mag"] = _on_off(args.mag)
    if args.band:
        doc["mag_band"] = _floats(args.band, 2)
    return F.FilterConfig.from_dict(doc)


def cmd_fuse(args):
    tr = _load_trial(args)
    if args.model:
        from .nn import checkpoint

        model, _ = checkpoint.load(_need_file(args.model, "model checkpoint"))
        quats = model.predict_trial(tr)
    else:
        quats = F.fuse_body(tr, filter_config_from_args(args)).quaternions
    D.write_trajectory(args.out, tr.t, quats)


def train_configs(args):
    from .nn.models import ModelConfig
    from .nn.train import TrainConfig

    doc = load_config(args.config, args.set, "train.json")
    model_doc = dict(doc.pop("model", {}))
    for flag, key in (("arch", "architecture"), ("cell", "cell"), ("repr", "representation")):
        if getattr(args, flag):
            model_doc[key] = getattr(args, flag)
    if args.hidden:
        model_doc["hidden"] = [int(h) for h in args.hidden.split(",")]
    if args.mag:
        model_doc["use_mag"] = _on_off(args.mag)
    for flag in ("window", "loss", "epochs"):
        v = getattr(args, flag)
        if v is not None:
            doc[flag] = v if flag != "window" or v == "full" else int(v)
    if args.seed is not None:
        doc["seed"] = args.seed
        model_doc["seed"] = args.seed
    return model_doc, TrainConfig(**doc)


def cmd_train(args):
    from .nn import checkpoint
    from .nn.models import FusionModel, ModelConfig
    from .nn.train import train

    model_doc, tcfg = train_configs(args)
    trials = D.load_manifest_trials(_need_file(args.manifest, "manifest"))
    split = D.split_by_subject(trials, seed=tcfg.seed)
    model_doc.setdefault("n_segments", trials[0].n_sensors)
    model = FusionModel(ModelConfig(**model_doc))
    model, report = train(model, split.train, split.val, tcfg, log=log.info)
    if args.report:
        report.write_csv(args.report)
    if report.status == "diverged":
        raise DivergenceError(report.message, {"epochs_completed": len(report.rows)})
    if report.status != "completed":
        raise RuntimeError(report.message)
    checkpoint.save(args.out, model, extra={"seed": tcfg.seed, "train": tcfg.to_dict(), "subjects": split.subjects})


def cmd_eval(args):
    t, pred = D.read_trajectory(_need_file(args.pred, "prediction"))
    _, gt = D.read_trajectory(_need_file(args.gt, "ground truth"))
    meta = {"pred": os.path.basename(args.pred), "gt": os.path.basename(args.gt), "seed": args.seed}
    rep = E.evaluate(pred, gt, meta=meta)
    D.atomic_write_text(args.report, rep.to_json())
    if args.csv_dir:
        D.atomic_write_text(os.path.join(args.csv_dir, "boxplot.csv"), rep.boxplot_csv())
        D.atomic_write_text(os.path.join(args.csv_dir, "timeseries.csv"), rep.series_csv(t))
    if args.svg_dir:
        D.atomic_write_text(os.path.join(args.svg_dir, "boxplot.svg"), E.boxplot_svg(rep))
        D.atomic_write_text(os.path.join(args.svg_dir, "timeplot.svg"), E.timeplot_svg(rep))
    print(f"mean QAD {rep.mean_deg:.4f} +- {rep.std_deg:.4f} deg")


def cmd_stats(args):
    if args.manifest:
        trials = D.load_manifest_trials(_need_file(args.manifest, "manifest"))
    else:
        trials = [D.parse_trial(_need_file(p, "input trial")) for p in args.inputs]
    if not trials:
        raise ContractError("no input trials")
    stats = D.descriptive_stats(trials)
    doc = {k: vars(v) for k, v in stats.items()}
    doc["n_trials"] = len(trials)
    doc["n_samples"] = int(sum(t.n_steps for t in trials))
    doc["seed"] = args.seed
    if args.out:
        _write_json(args.out, doc)
    else:
        print(json.dumps(doc, indent=2, sort_keys=True))


BENCH_METHODS = {
    "integral": {"kind": "integral"},
    "madgwick-nomag": {"kind": "madgwick", "use_mag": False},
    "madgwick-mag": {"kind": "madgwick", "use_mag": True},
    "madgwick-magreject": {"kind": "madgwick_magreject", "use_mag": True},
    "mahony": {"kind": "mahony"},
    "ekf": {"kind": "ekf"},
}


def cmd_bench(args):
    tr = D.parse_trial(_need_file(args.input, "input trial"))
    methods = args.methods.split(",")
    out = {}
    for name in methods:
        if name == "hybrid":
            from .nn import checkpoint

            model, _ = checkpoint.load(_need_file(args.model, "model checkpoint"))
            fn = E.model_stepper(model, tr)
        elif name in BENCH_METHODS:
            fn = E.filter_stepper(tr, F.FilterConfig(**BENCH_METHODS[name]))
        else:
            raise ContractError(f"unknown bench method {name!r}")
        out[name] = E.bench_latency(fn, tr.n_steps, args.warmup, args.iterations).to_dict()
    doc = {"latency_ms_per_sample": out, "n_sensors": tr.n_sensors, "seed": args.seed}
    if args.out:
        _write_json(args.out, doc)
    else:
        print(json.dumps(doc, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="inertialpose", description="Inertial pose estimation toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("synth", help="generate synthetic trials with ground truth")
    common(s)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("calibrate", help="estimate a calibration profile from the N-pose window")
    common(s, config=False)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--mounts", help="preset name (upper9, full17) or JSON file of expected sensor-to-segment quaternions")
    s.add_argument("--seconds", type=float, default=5.0)
    s.add_argument("--no-check", action="store_true", help="skip the static-window check")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("fuse", help="run a filter or learned model over a trial")
    common(s)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--profile", help="calibration profile to apply first")
    s.add_argument("--preprocess", action="store_true")
    s.add_argument("--filter", choices=F.KINDS)
    s.add_argument("--mag", choices=("on", "off"))
    s.add_argument("--band", help="magnetic rejection band LO,HI")
    s.add_argument("--model", help="model checkpoint (overrides --filter)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("train", help="train a learned fusion model")
    common(s)
    s.add_argument("--manifest", required=True)
    s.add_argument("--arch", choices=("model_free", "complementary", "cff_detached", "cff_feedback"))
    s.add_argument("--cell", choices=("rnn", "gru", "lstm"))
    s.add_argument("--repr", choices=("euler", "quaternion", "repr6d", "rotvec"))
    s.add_argument("--hidden", help="comma-separated layer widths")
    s.add_argument("--window")
    s.add_argument("--loss", choices=("qad", "mse", "qdist", "relqad"))
    s.add_argument("--mag", choices=("on", "off"))
    s.add_argument("--epochs", type=int)
    s.add_argument("--report", help="training report CSV")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="QAD report for a predicted trajectory")
    common(s, config=False)
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--csv-dir")
    s.add_argument("--svg-dir")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", help="descriptive statistics per modality")
    common(s, config=False)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--manifest")
    g.add_argument("--in", dest="inputs", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("bench", help="per-sample latency of fusion methods")
    common(s, config=False)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--methods", default="integral,madgwick-nomag,madgwick-mag")
    s.add_argument("--model", help="checkpoint for the 'hybrid' method")
    s.add_argument("--warmup", type=int, default=10)
    s.add_argument("--iterations", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)
    return p


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s: %(message)s")
    try:
        args.func(args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ContractError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except Exception as exc:  # noqa: BLE001
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
