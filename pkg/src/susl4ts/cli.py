"""Command line driver: ``susl4ts <command> [options]``.

Every option can also be given in a flat ``key = value`` config file passed
with ``--config``; command line flags win over file values. Keys are the
long option names with dashes replaced by underscores. ``--print-config``
prints every resolved value (defaults included) and exits.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.

Environment: ``SUSL_OUTPUT_DIR`` sets the default output directory and
``SUSL_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import (DataError, RegimeSpec, build_regime, ingest_har_dir, ingest_mitbih_csv,
                       ingest_ucr_tsv, load_bundle, save_bundle, znormalize)
from .evaluation import embeddings_csv, evaluate, export_embeddings, sample_class
from .hpsearch import SearchSpace, run_search
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .trainer import DivergenceError, TrainConfig, config_dict, train

log = logging.getLogger("susl4ts")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
FORMATS = ("ucr-tsv", "mitbih-csv", "har-dir")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flag(p, name, **kw):
    p.add_argument("--" + name, dest=name.replace("-", "_"), **kw)


def _common(p):
    _flag(p, "config", default=None, help="key = value file supplying option defaults")
    p.add_argument("--print-config", action="store_true",
                   help="print every resolved option and exit")
    _flag(p, "output-dir", default=os.environ.get("SUSL_OUTPUT_DIR", "out"),
          help="directory for all outputs (env SUSL_OUTPUT_DIR)")
    _flag(p, "log-level", default="info", choices=("debug", "info", "warning", "error"))


def _regime_opts(p):
    _flag(p, "labeled-fraction", type=float, default=1.0, help="fraction of labels kept per class")
    _flag(p, "hidden", default="", help="comma-separated class names or indices to hide")
    _flag(p, "augmented", type=int, default=0, help="number of extra cluster slots |C_a|")
    _flag(p, "validation-fraction", type=float, default=0.2)
    _flag(p, "seed", type=int, default=0)


def _model_opts(p):
    _flag(p, "variant", default="conv", choices=("conv", "mlp"))
    _flag(p, "latent-dim", type=int, default=10)
    _flag(p, "layers", type=int, default=2)
    _flag(p, "filters", type=int, default=32)
    _flag(p, "units", type=int, default=256)
    _flag(p, "kernel-size", type=int, default=5)


def _train_opts(p):
    _flag(p, "lr", type=float, default=1e-3)
    _flag(p, "epochs", type=int, default=100)
    _flag(p, "batch-size", type=int, default=512)
    _flag(p, "alpha", type=float, default=1.0)
    _flag(p, "gamma", type=float, default=1.0)
    _flag(p, "weight-decay", type=float, default=0.0)
    _flag(p, "clip", type=float, default=1.0)
    _flag(p, "dtype", default="float64", choices=("float64", "float32"))
    _flag(p, "max-rows", type=int, default=0, help="decoder rows per shard (0 = no sharding)")
    _flag(p, "znormalize", type=_boolean, default=True)


def _boolean(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def build_parser():
    parser = _Parser(prog="susl4ts", description="Time-series classification with partial labels and unseen classes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="convert a raw dataset into a canonical bundle")
    _common(p)
    _flag(p, "format", required=False, choices=FORMATS)
    _flag(p, "input", nargs="+", default=None,
          help="dataset directory, or TRAIN TEST csv files for mitbih-csv")
    _flag(p, "length", type=int, default=0, help="ucr-tsv: pad/truncate check length (0 = any)")
    _flag(p, "name", default="", help="bundle file stem inside the output directory")

    p = sub.add_parser("train", help="train one model on a bundle")
    _common(p)
    _flag(p, "data", default=None, help="bundle stem (path without .meta/.csv)")
    _regime_opts(p)
    _model_opts(p)
    _train_opts(p)

    p = sub.add_parser("search", help="random hyperparameter search on a bundle")
    _common(p)
    _flag(p, "data", default=None)
    _regime_opts(p)
    _flag(p, "variant", default="conv", choices=("conv", "mlp"))
    _train_opts(p)
    _flag(p, "trials", type=int, default=60)
    _flag(p, "prune", type=_boolean, default=False)
    _flag(p, "jobs", type=int, default=1)

    p = sub.add_parser("eval", help="score a checkpoint on a bundle split")
    _common(p)
    _flag(p, "checkpoint", default=None)
    _flag(p, "data", default=None)
    _flag(p, "split", default="test", choices=("train", "test"))

    p = sub.add_parser("embed", help="export latent means of the training split")
    _common(p)
    _flag(p, "checkpoint", default=None)
    _flag(p, "data", default=None)

    p = sub.add_parser("sample", help="generate series from one cluster")
    _common(p)
    _flag(p, "checkpoint", default=None)
    _flag(p, "cluster", type=int, default=0)
    _flag(p, "count", type=int, default=10)
    _flag(p, "seed", type=int, default=0)

    p = sub.add_parser("report", help="tabulate several eval outputs by dataset and regime")
    _common(p)
    _flag(p, "inputs", nargs="+", default=None, help="eval output directories")
    return parser


# ------------------------------------------------------------------ config


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        return action.choices[command]


def _read_config(path):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise UsageError(f"cannot read config file: {err}") from err
    try:
        cp.read_string("[top]\n" + text)
    except configparser.Error as err:
        raise UsageError(f"{path}: {err}") from err
    return dict(cp["top"])


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        known = {a.dest: a for a in sub._actions}
        values = _read_config(args.config)
        defaults = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in known or key in ("config", "print_config", "help"):
                sub.error(f"unknown key {key!r} in config file {args.config}")
            action = known[key]
            val = raw.split() if action.nargs == "+" else raw
            if action.type is not None:
                try:
                    val = [action.type(v) for v in val] if isinstance(val, list) else action.type(val)
                except (ValueError, argparse.ArgumentTypeError) as err:
                    sub.error(f"config key {key}: {err}")
            if action.choices is not None and val not in action.choices:
                sub.error(f"config key {key}: {val!r} not in {sorted(action.choices)}")
            defaults[key] = val
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def resolved(args):
    """All options of the invoked command as a plain, sorted dict."""
    skip = {"config", "print_config", "log_level"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _portable(spec):
    """Resolved options minus where outputs go; embedded in checkpoints."""
    return {k: v for k, v in spec.items() if k != "output_dir"}


def _config_text(spec):
    out = []
    for k, v in spec.items():
        if k == "command":
            continue
        if isinstance(v, list):
            v = " ".join(map(str, v))
        out.append(f"{k} = {'' if v is None else v}")
    return "\n".join(out) + "\n"


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, [], "")]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): "
                         + ", ".join("--" + n.replace("_", "-") for n in missing))


def _outdir(args):
    path = Path(args.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_spec(outdir, spec, extra=None):
    body = {"spec": spec, "version": __version__}
    if extra:
        body.update(extra)
    (outdir / "spec.json").write_text(json.dumps(body, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------- commands


def _parse_hidden(text, class_names):
    hidden = set()
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        if tok in class_names:
            hidden.add(class_names.index(tok))
        elif tok.lstrip("-").isdigit() and 0 <= int(tok) < len(class_names):
            hidden.add(int(tok))
        else:
            raise UsageError(f"unknown class {tok!r}; classes are {', '.join(class_names)}")
    return frozenset(hidden)


def _regime(args, bundle):
    try:
        return RegimeSpec(labeled_fraction=args.labeled_fraction,
                          hidden_classes=_parse_hidden(args.hidden, bundle.class_names),
                          n_augmented=args.augmented, seed=args.seed,
                          validation_fraction=args.validation_fraction)
    except ValueError as err:
        raise UsageError(str(err)) from err


def _train_config(args):
    try:
        return TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                           alpha=args.alpha, gamma=args.gamma, weight_decay=args.weight_decay,
                           clip=args.clip, seed=args.seed, dtype=args.dtype,
                           max_rows=args.max_rows or None)
    except ValueError as err:
        raise UsageError(str(err)) from err


def _load(args, splits):
    bundle = load_bundle(args.data, splits=splits)
    return znormalize(bundle) if getattr(args, "znormalize", True) else bundle


def cmd_ingest(args, spec):
    _require(args, "format", "input")
    if args.format == "ucr-tsv":
        bundle = ingest_ucr_tsv(args.input[0], length=args.length or None)
    elif args.format == "mitbih-csv":
        if len(args.input) != 2:
            raise UsageError("mitbih-csv needs two inputs: TRAIN.csv TEST.csv")
        bundle = ingest_mitbih_csv(*args.input)
    else:
        bundle = ingest_har_dir(args.input[0])
    out = _outdir(args)
    stem = out / (args.name or bundle.name)
    save_bundle(bundle, stem)
    _write_spec(out, spec)
    lines = [f"bundle {stem} ({bundle.channels} x {bundle.length})", "class,train,test"]
    for name, a, b in zip(bundle.class_names, bundle.class_counts("train"),
                          bundle.class_counts("test")):
        lines.append(f"{name},{a},{b}")
    print("\n".join(lines))


def cmd_train(args, spec):
    _require(args, "data")
    bundle = _load(args, ("train",))
    regime = _regime(args, bundle)
    try:
        mc = ModelConfig(channels=bundle.channels, length=bundle.length,
                         n_known_classes=bundle.n_classes, n_augmented_classes=args.augmented,
                         latent_dim=args.latent_dim, layers=args.layers, filters=args.filters,
                         units=args.units, kernel_size=args.kernel_size, variant=args.variant)
    except ValueError as err:
        raise UsageError(str(err)) from err
    tc = _train_config(args)
    try:
        labeled, unlabeled, validation = build_regime(bundle, regime)
    except ValueError as err:
        raise UsageError(str(err)) from err
    out = _outdir(args)
    meta = {"spec": _portable(spec), "resolved": config_dict(mc, tc, regime),
            "class_names": list(bundle.class_names), "dataset": bundle.name}
    _write_spec(out, spec, {"resolved": meta["resolved"]})
    log.info("regime %s: %d labeled, %d unlabeled, %d validation", regime.name,
             len(labeled), len(unlabeled), len(validation))
    try:
        best, history = train(mc, tc, labeled, unlabeled, validation,
                              regime.known_classes(bundle.n_classes), n_true=bundle.n_classes)
    except DivergenceError as err:
        (out / "history.csv").write_text(err.history.to_csv())
        save_checkpoint(out / "model.ckpt", err.best_params, dict(meta, diverged=str(err)))
        raise
    (out / "history.csv").write_text(history.to_csv())
    save_checkpoint(out / "model.ckpt", best, meta)
    print(f"best validation accuracy {max(history.column('val_acc')):.6f}; wrote {out}")


def cmd_search(args, spec):
    _require(args, "data")
    bundle = _load(args, ("train",))
    regime = _regime(args, bundle)
    base = _train_config(args)
    out = _outdir(args)
    _write_spec(out, spec)
    try:
        result = run_search(bundle, regime, SearchSpace(), n_trials=args.trials, base=base,
                            variant=args.variant, seed=args.seed, prune=args.prune,
                            n_jobs=args.jobs, evaluate_test=False, log_path=out / "trials.jsonl")
    except RuntimeError as err:
        raise DivergenceError(str(err), None, None) from err
    best = result.best
    r = replace(regime, n_augmented=best.config["n_augmented"])
    mc = result.best_params.config
    tc = replace(base, lr=best.config["lr"], alpha=best.config["alpha"],
                 gamma=best.config["gamma"], weight_decay=best.config["weight_decay"],
                 clip=best.config["clip"], seed=best.seed)
    meta = {"spec": _portable(spec), "resolved": config_dict(mc, tc, r), "trial": best.number,
            "class_names": list(bundle.class_names), "dataset": bundle.name}
    save_checkpoint(out / "model.ckpt", result.best_params, meta)
    (out / "history.csv").write_text(best.history_csv)
    print(f"best trial {best.number}: validation accuracy {best.val_accuracy:.6f}; wrote {out}")


def _checkpoint(args):
    try:
        return load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as err:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {err}") from err


def _known_from_meta(meta, n_classes):
    reg = meta.get("resolved", {}).get("regime")
    if reg is None:
        return frozenset(range(n_classes))
    return RegimeSpec(labeled_fraction=reg["labeled_fraction"],
                      hidden_classes=reg["hidden_classes"]).known_classes(n_classes)


def _check_compatible(params, bundle):
    cfg = params.config
    if (bundle.channels, bundle.length, bundle.n_classes) != \
            (cfg.channels, cfg.length, cfg.n_known_classes):
        raise DataError("checkpoint and bundle disagree on shape or number of classes")


def cmd_eval(args, spec):
    _require(args, "checkpoint", "data")
    params, meta = _checkpoint(args)
    bundle = _load_eval(args, meta)
    _check_compatible(params, bundle)
    X, y = bundle.split(args.split)
    if X is None or len(X) == 0:
        raise DataError(f"bundle has no {args.split} split")
    rep = evaluate(params, X, y, _known_from_meta(meta, bundle.n_classes), bundle.class_names)
    out = _outdir(args)
    _write_spec(out, spec, {"checkpoint_spec": meta.get("spec"),
                            "regime": _regime_name(meta), "dataset": bundle.name})
    (out / "report.txt").write_text(rep.to_text())
    (out / "metrics.csv").write_text(rep.metrics_csv())
    (out / "confusion.csv").write_text(rep.confusion_csv())
    (out / "cluster_map.csv").write_text(rep.cluster_map_csv())
    print(rep.to_text(), end="")


def _load_eval(args, meta):
    znorm = meta.get("spec", {}).get("znormalize", True)
    bundle = load_bundle(args.data, splits=(args.split,))
    return znormalize(bundle) if znorm else bundle


def _regime_name(meta):
    reg = meta.get("resolved", {}).get("regime")
    if reg is None:
        return "?"
    return RegimeSpec(labeled_fraction=reg["labeled_fraction"],
                      hidden_classes=reg["hidden_classes"]).name


def cmd_embed(args, spec):
    _require(args, "checkpoint", "data")
    params, meta = _checkpoint(args)
    args.split = "train"
    bundle = _load_eval(args, meta)
    _check_compatible(params, bundle)
    ids, y, pred, z = export_embeddings(params, bundle.X_train, bundle.y_train, bundle.train_ids)
    out = _outdir(args)
    _write_spec(out, spec, {"checkpoint_spec": meta.get("spec")})
    (out / "embeddings.csv").write_text(embeddings_csv(ids, y, pred, z))
    print(f"wrote {len(ids)} embeddings to {out / 'embeddings.csv'}")


def cmd_sample(args, spec):
    _require(args, "checkpoint")
    params, meta = _checkpoint(args)
    if not 0 <= args.cluster < params.config.n_classes:
        raise UsageError(f"--cluster must lie in 0..{params.config.n_classes - 1}")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    series = sample_class(params, args.cluster, args.count, seed=args.seed)
    out = _outdir(args)
    _write_spec(out, spec, {"checkpoint_spec": meta.get("spec")})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cfg = params.config
    w.writerow(["sample", "channel"] + [f"t_{i}" for i in range(cfg.length)])
    for i, s in enumerate(series):
        for ch in range(cfg.channels):
            w.writerow([i, ch] + [repr(float(v)) for v in s[ch]])
    (out / "samples.csv").write_text(buf.getvalue())
    print(f"wrote {args.count} samples of cluster {args.cluster} to {out / 'samples.csv'}")


REGIME_ORDER = ("UL", "SuSL", "SSL", "SL")


def cmd_report(args, spec):
    _require(args, "inputs")
    rows = {}
    for d in args.inputs:
        d = Path(d)
        try:
            info = json.loads((d / "spec.json").read_text())
            metrics = dict(csv.reader(io.StringIO((d / "metrics.csv").read_text())))
        except (OSError, ValueError) as err:
            raise DataError(f"{d}: not an eval output directory ({err})") from err
        key = (info.get("dataset", "?"), info.get("regime", "?"))
        rows.setdefault(key, []).append(
            (float(metrics["accuracy"]), float(metrics["macro_f1"]), float(metrics["weighted_f1"])))
    datasets = sorted({k[0] for k in rows})
    regimes = [r for r in REGIME_ORDER if any(k[1] == r for k in rows)] + \
        sorted({k[1] for k in rows} - set(REGIME_ORDER))
    lines = ["| dataset | " + " | ".join(regimes) + " |",
             "|---" * (len(regimes) + 1) + "|"]
    table = ["dataset,regime,n,accuracy,macro_f1,weighted_f1"]
    for ds in datasets:
        cells = []
        for rg in regimes:
            vals = rows.get((ds, rg))
            if not vals:
                cells.append("")
                continue
            acc, mf, wf = (100 * float(np.mean(c)) for c in zip(*vals))
            cells.append(f"{acc:.2f}")
            table.append(f"{ds},{rg},{len(vals)},{acc:.4f},{mf:.4f},{wf:.4f}")
        lines.append(f"| {ds} | " + " | ".join(cells) + " |")
    out = _outdir(args)
    _write_spec(out, spec)
    (out / "report.md").write_text("Test accuracy (%) by regime\n\n" + "\n".join(lines) + "\n")
    (out / "report.csv").write_text("\n".join(table) + "\n")
    print("\n".join(lines))


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "search": cmd_search, "eval": cmd_eval,
            "embed": cmd_embed, "sample": cmd_sample, "report": cmd_report}


def main(argv=None):
    try:
        args = parse_args(argv)
    except UsageError as err:
        print(f"susl4ts: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse: --help / --version / usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    spec = resolved(args)
    if args.print_config:
        print(_config_text(spec), end="")
        return EXIT_OK
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(message)s")
    threads = os.environ.get("SUSL_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            try:
                n = int(threads)
            except ValueError:
                raise UsageError(f"SUSL_THREADS must be an integer, got {threads!r}") from None
            with threadpool_limits(limits=n):
                COMMANDS[args.command](args, spec)
        else:
            COMMANDS[args.command](args, spec)
    except UsageError as err:
        print(f"susl4ts: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError) as err:
        print(f"susl4ts: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as err:
        print(f"susl4ts: training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
