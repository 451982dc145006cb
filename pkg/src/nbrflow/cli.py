"""Command-line workflow: ``nbrflow <command> [--config FILE] [--key value ...]``.

Settings resolve in the order built-in defaults, then the config file (YAML
or JSON), then command-line flags.  The seed falls back to ``NBRFLOW_SEED``
when neither source sets it.  Every command writes a ``*.config.json``
snapshot of its resolved settings next to its main output.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import Dataset, generate, read_csv, read_idx_images, read_idx_labels, split, write_csv
from .errors import (BadNeighborhoodId, DomainError, MissingLabels, MissingTable, NbrflowError, NonFiniteError,
                     NonFiniteLoss, SizeMismatch)
from .estimators import build_estimator, conditional_sample, marginal_log_likelihoods, unconditional_sample
from .metrics import (MetricReport, bits_per_dimension, config_digest, interpolate_neighborhoods,
                      novelty_scores, roc_auc, roc_curve, write_reports)
from .neighborhoods import build_table, cluster_neighborhoods, fit_pca, load_table
from .training import TrainConfig, fit, load_checkpoint, parse_checkpoint, save_checkpoint

log = logging.getLogger("nbrflow")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


# option tables: key -> (type, default, help); None default means "unset"

COMMON = {"seed": (int, None, "random seed (falls back to NBRFLOW_SEED, then 0)")}

OPTIONS = {
    "gen-data": {
        "kind": (str, "moons", "moons | rings | gaussian-grid | pinwheel | csv | idx-images"),
        "n": (int, 2000, "number of points for generators"),
        "noise": (float, 0.1, "generator noise scale"),
        "input": (str, None, "source file for csv / idx-images"),
        "labels_input": (str, None, "IDX label file for idx-images"),
        "downsample": (int, 2, "block-average factor for idx-images"),
        "out": (str, None, "output CSV"),
    },
    "neighbors": {
        "data": (str, None, "training CSV"),
        "out": (str, None, "output table file"),
        "k": (int, 5, "neighbours per point"),
        "pca_var": (float, 0.99, "explained-variance threshold for PCA"),
        "clusters": (int, None, "cluster mode: number of clusters"),
        "prototypes": (int, 5, "cluster mode: prototypes per cluster"),
        "class_restrict": (bool, False, "restrict neighbours to the same class"),
        "include_self": (bool, False, "let a point be its own neighbour"),
    },
    "train": {
        "model": (str, "nct", "rnvp | cc | ncl | nct"),
        "data": (str, None, "training CSV"),
        "valid": (str, None, "validation CSV (defaults to the training data)"),
        "table": (str, None, "neighbourhood table (ncl / nct)"),
        "out": (str, None, "output checkpoint"),
        "epochs": (int, 100, "maximum epochs"),
        "batch_size": (int, 128, "minibatch size"),
        "lr": (float, 1e-3, "learning rate"),
        "optimizer": (str, "adam", "adam | sgd"),
        "patience": (int, 10, "early-stopping patience in epochs"),
        "contrastive": (bool, False, "train with the margin objective"),
        "margin_bpd": (float, 0.5, "contrastive margin in bits per dimension"),
        "model_negatives": (bool, False, "draw contrastive negatives from the model"),
        "couplings": (int, 6, "number of coupling layers"),
        "hidden": (int, 64, "hidden width of coupling and head networks"),
        "depth": (int, 2, "hidden layers per coupling network"),
        "transformed_cond": (bool, False, "nct: feed flow-transformed neighbours to the couplings"),
    },
    "sample": {
        "checkpoint": (str, None, "trained checkpoint"),
        "data": (str, None, "training CSV (defaults to the one recorded at training time)"),
        "table": (str, None, "table file (defaults to the one recorded at training time)"),
        "neighborhood_id": (int, None, "table entry to condition on"),
        "class_id": (int, None, "cc models: class to condition on"),
        "unconditional": (bool, False, "sample the full generative model"),
        "n": (int, 500, "number of samples"),
        "out": (str, None, "output CSV"),
        "svg": (str, None, "scatter plot path (2-D data; defaults next to the CSV)"),
    },
    "eval": {
        "checkpoint": (str, None, "trained checkpoint"),
        "data": (str, None, "training CSV (defaults to the one recorded at training time)"),
        "table": (str, None, "table file (defaults to the one recorded at training time)"),
        "test": (str, None, "test CSV"),
        "marginal": (int, None, "evaluate the marginal with M neighbourhoods per point"),
        "out": (str, None, "metrics file (JSON lines)"),
        "scores": (str, None, "optional per-point log-likelihood CSV"),
    },
    "novelty": {
        "data": (str, None, "labelled CSV"),
        "test": (str, None, "labelled test CSV (defaults to a held-out split of --data)"),
        "normal_class": (int, 0, "class treated as normal during training"),
        "model": (str, "ncl", "rnvp | ncl | nct"),
        "k": (int, 5, "neighbours per point"),
        "pca_var": (float, 0.99, "explained-variance threshold for PCA"),
        "epochs": (int, 100, "maximum epochs"),
        "batch_size": (int, 128, "minibatch size"),
        "lr": (float, 1e-3, "learning rate"),
        "patience": (int, 10, "early-stopping patience in epochs"),
        "contrastive": (bool, False, "train with the margin objective"),
        "margin_bpd": (float, 0.5, "contrastive margin in bits per dimension"),
        "couplings": (int, 6, "number of coupling layers"),
        "hidden": (int, 64, "hidden width"),
        "out": (str, None, "metrics file (JSON lines)"),
        "roc": (str, None, "ROC curve CSV (defaults next to --out)"),
        "checkpoint": (str, None, "optionally save the trained model here"),
    },
    "interpolate": {
        "checkpoint": (str, None, "trained checkpoint"),
        "data": (str, None, "training CSV (defaults to the one recorded at training time)"),
        "table": (str, None, "table file (defaults to the one recorded at training time)"),
        "id_a": (int, None, "first table entry"),
        "id_b": (int, None, "second table entry"),
        "samples_per_step": (int, 200, "samples drawn at each step"),
        "out": (str, None, "output CSV"),
        "svg": (str, None, "panel figure path (defaults next to the CSV)"),
    },
}

REQUIRED = {
    "gen-data": ["out"], "neighbors": ["data", "out"], "train": ["data", "out"],
    "sample": ["checkpoint", "out"], "eval": ["checkpoint", "test", "out"],
    "novelty": ["data", "out"], "interpolate": ["checkpoint", "id_a", "id_b", "out"],
}


def _str2bool(v: str) -> bool:
    low = str(v).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {v!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nbrflow", description="Neighbour-conditioned normalizing flows")
    parser.add_argument("--version", action="version", version=f"nbrflow {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON file with settings for this command")
        for key, (typ, default, help_) in {**opts, **COMMON}.items():
            flag = "--" + key.replace("_", "-")
            shown = f" (default: {default})" if default is not None else ""
            if typ is bool:
                # bare flag sets true; an explicit value is also accepted
                p.add_argument(flag, dest=key, nargs="?", const=True, default=None, type=_str2bool,
                               help=help_ + shown)
            else:
                p.add_argument(flag, dest=key, type=typ, default=None, help=help_ + shown)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    opts = {**OPTIONS[command], **COMMON}
    cfg = {k: v[1] for k, v in opts.items()}
    if args.config:
        with open(args.config) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config}: expected a mapping of settings")
        for key, value in loaded.items():
            key = key.replace("-", "_")
            if key not in opts:
                raise UsageError(f"{args.config}: unknown setting {key!r} for {command}")
            typ = opts[key][0]
            cfg[key] = _str2bool(value) if typ is bool else (None if value is None else typ(value))
    for key in opts:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["seed"] is None:
        env = os.environ.get("NBRFLOW_SEED")
        try:
            cfg["seed"] = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"NBRFLOW_SEED must be an integer, got {env!r}") from None
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required setting(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def write_snapshot(out_path, command: str, cfg: dict, digest: str | None) -> Path:
    snap = {"command": command, "version": __version__, "config": cfg, "dataset_digest": digest}
    path = Path(str(out_path) + ".config.json")
    path.write_text(json.dumps(snap, sort_keys=True, indent=1) + "\n")
    return path


# SVG output

def _scale(points, size=400.0, pad=20.0):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)

    def f(p):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 2)
        xy = pad + (p - lo) / span * (size - 2 * pad)
        xy[:, 1] = size - xy[:, 1]
        return xy
    return f


def _circles(xy, cls, fill, r):
    return [f'<circle class="{cls}" cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{fill}"/>' for x, y in xy]


def scatter_svg(path, samples, members=None, background=None, size=400) -> None:
    layers = [np.asarray(a).reshape(-1, 2) for a in (samples, members, background) if a is not None]
    allpts = np.vstack(layers) if sum(len(a) for a in layers) else np.zeros((1, 2))
    f = _scale(allpts, size)
    body = []
    if background is not None and len(background):
        body += _circles(f(background), "data", "#cccccc", 1.5)
    if len(samples):
        body += _circles(f(samples), "sample", "#1f5fbf", 2)
    if members is not None:
        body += _circles(f(members), "member", "red", 4)
    svg = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">', f'<rect width="{size}" height="{size}" fill="white"/>',
           *body, "</svg>"]
    Path(path).write_text("\n".join(svg) + "\n")


def panel_svg(path, steps, background=None, size=200) -> None:
    """One scatter panel per interpolation step, left to right."""
    allpts = np.vstack([np.vstack([s, x]) for s, x in steps])
    f = _scale(allpts, size)
    width = size * len(steps)
    body = []
    for t, (members, samples) in enumerate(steps):
        body.append(f'<g class="step" transform="translate({t * size},0)">')
        body.append(f'<rect width="{size}" height="{size}" fill="white" stroke="#888"/>')
        if background is not None:
            body += _circles(f(background), "data", "#dddddd", 1)
        body += _circles(f(samples), "sample", "#1f5fbf", 1.5)
        body += _circles(f(members), "member", "red", 3)
        body.append(f'<text x="6" y="16" font-size="12">step {t}</text>')
        body.append("</g>")
    svg = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{size}" '
           f'viewBox="0 0 {width} {size}">', *body, "</svg>"]
    Path(path).write_text("\n".join(svg) + "\n")


def _write_points(path, x, extra_cols=None) -> None:
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1] if x.ndim == 2 else 0
    names = list(extra_cols or {}) + [f"x{j}" for j in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(len(x)):
            w.writerow([str(v[i]) for v in (extra_cols or {}).values()] + [repr(float(v)) for v in x[i]])


# commands

def cmd_gen_data(cfg: dict) -> int:
    rng = np.random.default_rng(cfg["seed"])
    kind = cfg["kind"]
    if kind == "csv":
        if not cfg["input"]:
            raise UsageError("gen-data --kind csv needs --input")
        ds = read_csv(cfg["input"])
    elif kind == "idx-images":
        if not cfg["input"]:
            raise UsageError("gen-data --kind idx-images needs --input")
        x = read_idx_images(cfg["input"], cfg["downsample"])
        labels = read_idx_labels(cfg["labels_input"]) if cfg["labels_input"] else None
        if labels is not None and len(labels) != len(x):
            raise ValueError("image and label counts differ")
        ds = Dataset(x, labels)
    else:
        ds = generate(kind, cfg["n"], cfg["noise"], rng)
    write_csv(cfg["out"], ds)
    write_snapshot(cfg["out"], "gen-data", cfg, ds.digest())
    log.info("wrote %d points to %s", len(ds), cfg["out"])
    return 0


def cmd_neighbors(cfg: dict) -> int:
    ds = read_csv(cfg["data"])
    labels = None
    if cfg["class_restrict"]:
        if ds.labels is None:
            raise MissingLabels("--class-restrict needs a labelled CSV")
        labels = ds.labels
    proj = fit_pca(ds.x, cfg["pca_var"])
    if cfg["clusters"]:
        table = cluster_neighborhoods(ds.x, proj, cfg["clusters"], cfg["prototypes"],
                                      np.random.default_rng(cfg["seed"]), labels=labels)
    else:
        table = build_table(ds.x, proj, cfg["k"], labels, cfg["include_self"])
    table.save(cfg["out"])
    write_snapshot(cfg["out"], "neighbors", cfg, table.dataset_digest)
    log.info("wrote %s table with %d entries to %s", table.mode, len(table), cfg["out"])
    return 0


def _load_bound_table(table_path, ds: Dataset):
    raw_header = json.loads(Path(table_path).read_bytes().split(b"\n", 1)[0])
    labels = ds.labels if raw_header.get("class_restricted") else None
    return load_table(table_path, ds.x, labels)


def cmd_train(cfg: dict) -> int:
    model = cfg["model"]
    if model not in ("rnvp", "cc", "ncl", "nct"):
        raise UsageError(f"unknown model {model!r}")
    ds = read_csv(cfg["data"])
    if cfg["valid"]:
        valid = read_csv(cfg["valid"])
    else:
        warnings.warn("no --valid given; early stopping monitors the training data", UserWarning)
        valid = ds
    table = None
    if model in ("ncl", "nct"):
        if not cfg["table"]:
            raise MissingTable(f"--model {model} needs --table")
        table = _load_bound_table(cfg["table"], ds)
    elif cfg["table"]:
        warnings.warn(f"--model {model} does not use a neighbourhood table; ignoring --table", UserWarning)
    n_classes = None
    if model == "cc":
        if ds.labels is None or valid.labels is None:
            raise MissingLabels("--model cc needs labelled training and validation data")
        n_classes = int(max(ds.labels.max(), valid.labels.max())) + 1
    rng = np.random.default_rng(cfg["seed"])
    est = build_estimator(model, ds.d, table, cfg["couplings"], cfg["hidden"], cfg["depth"],
                          n_classes=n_classes, transformed_cond=cfg["transformed_cond"], rng=rng)
    tcfg = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"],
                       optimizer=cfg["optimizer"], contrastive=cfg["contrastive"],
                       margin_bpd=cfg["margin_bpd"], model_negatives=cfg["model_negatives"],
                       early_stop_patience=cfg["patience"], seed=cfg["seed"])
    if tcfg.contrastive and model not in ("ncl", "nct"):
        raise UsageError("--contrastive needs a neighbour-conditioned model (ncl or nct)")
    labels = ds.labels if model == "cc" else None
    vlabels = valid.labels if model == "cc" else None
    est, hist = fit(est, ds.x, valid.x, tcfg, labels, vlabels,
                    callback=lambda r: log.info("epoch %d valid nll %.4f", r["epoch"], r["valid_nll"]))
    extra = {"data": str(Path(cfg["data"]).resolve()),
             "table": None if table is None else str(Path(cfg["table"]).resolve())}
    save_checkpoint(est, cfg["out"], est.meta["optimizer"], extra=extra)
    Path(str(cfg["out"]) + ".history.json").write_text(hist.to_json() + "\n")
    write_snapshot(cfg["out"], "train", cfg, ds.digest())
    log.info("best valid nll %.4f at epoch %d", hist.best_valid_nll, hist.best_epoch)
    return 0


def _load_model(cfg: dict):
    """Checkpoint plus the training data and table it was trained with."""
    raw = Path(cfg["checkpoint"]).read_bytes()
    header, _, _ = parse_checkpoint(raw)
    extra = header.get("extra", {})
    data_path = cfg.get("data") or extra.get("data")
    table_path = cfg.get("table") or extra.get("table")
    ds = read_csv(data_path) if data_path else None
    table = None
    if header["architecture"]["variant"] in ("ncl", "nct"):
        if not table_path or ds is None:
            raise MissingTable("this model needs its training data and neighbourhood table")
        table = _load_bound_table(table_path, ds)
    return load_checkpoint(cfg["checkpoint"], table), ds


def cmd_sample(cfg: dict) -> int:
    est, ds = _load_model(cfg)
    rng = np.random.default_rng(cfg["seed"])
    n = cfg["n"]
    if n < 0:
        raise UsageError("--n must be non-negative")
    members = None
    if cfg["unconditional"] or est.variant == "rnvp":
        x = unconditional_sample(est, rng, n) if n else np.zeros((0, est.d))
    elif est.variant == "cc":
        if cfg["class_id"] is None:
            raise UsageError("cc models need --class-id or --unconditional")
        if not 0 <= cfg["class_id"] < est.head.n_classes:
            raise BadNeighborhoodId(f"class id {cfg['class_id']} out of range")
        x = conditional_sample(est, cfg["class_id"], rng, n) if n else np.zeros((0, est.d))
    else:
        i = cfg["neighborhood_id"]
        if i is None:
            raise UsageError("give --neighborhood-id or --unconditional")
        if not 0 <= i < len(est.table):
            raise BadNeighborhoodId(f"neighborhood id {i} outside table of {len(est.table)} entries")
        neigh = est.table.entries[i]
        members = neigh.member_vectors
        x = conditional_sample(est, neigh, rng, n) if n else np.zeros((0, est.d))
    _write_points(cfg["out"], x)
    if est.d == 2:
        svg = cfg["svg"] or str(Path(cfg["out"]).with_suffix(".svg"))
        scatter_svg(svg, x, members, None if ds is None else ds.x)
    write_snapshot(cfg["out"], "sample", cfg, None if ds is None else ds.digest())
    return 0


def cmd_eval(cfg: dict) -> int:
    est, ds = _load_model(cfg)
    test = read_csv(cfg["test"])
    rng = np.random.default_rng(cfg["seed"])
    m = cfg["marginal"]
    if m is not None:
        ll = marginal_log_likelihoods(est, test.x, m, rng)
        mode = "marginal"
    else:
        if est.variant == "cc" and test.labels is None:
            raise MissingLabels("cc evaluation needs a labelled test CSV")
        ll = novelty_scores(est, test.x, test.labels)
        mode = "conditional" if est.conditional or est.variant == "cc" else "unconditional"
    digest = config_digest(cfg)
    nll = float(-np.mean(ll))
    reports = [MetricReport(f"{mode}_nll_nats", nll, len(ll), digest, cfg["seed"]),
               MetricReport(f"{mode}_bpd", float(bits_per_dimension(-nll, test.d)), len(ll), digest, cfg["seed"])]
    write_reports(cfg["out"], reports)
    if cfg["scores"]:
        with open(cfg["scores"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["log_likelihood"])
            w.writerows([[repr(float(v))] for v in ll])
    write_snapshot(cfg["out"], "eval", cfg, test.digest())
    print(f"{mode} nll {nll:.6f} nats ({reports[1].value:.6f} bpd) over {len(ll)} points")
    return 0


def cmd_novelty(cfg: dict) -> int:
    ds = read_csv(cfg["data"])
    if ds.labels is None:
        raise MissingLabels("novelty detection needs a labelled CSV")
    model = cfg["model"]
    if model not in ("rnvp", "ncl", "nct"):
        raise UsageError("novelty supports --model rnvp, ncl or nct")
    rng = np.random.default_rng(cfg["seed"])
    if cfg["test"]:
        test = read_csv(cfg["test"])
        train_part, valid_part = split(ds, [0.85, 0.15], rng)
    else:
        train_part, valid_part, test = split(ds, [0.7, 0.15, 0.15], rng)
    if test.labels is None:
        raise MissingLabels("the test CSV needs labels")
    normal = cfg["normal_class"]
    train = train_part.x[train_part.labels == normal]
    valid = valid_part.x[valid_part.labels == normal]
    if len(train) <= cfg["k"] or len(valid) == 0:
        raise ValueError(f"too few points of class {normal} to train on")
    table = None
    if model in ("ncl", "nct"):
        table = build_table(train, fit_pca(train, cfg["pca_var"]), cfg["k"])
    est = build_estimator(model, ds.d, table, cfg["couplings"], cfg["hidden"], rng=rng)
    tcfg = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"],
                       contrastive=cfg["contrastive"] and model != "rnvp", margin_bpd=cfg["margin_bpd"],
                       early_stop_patience=cfg["patience"], seed=cfg["seed"])
    est, _ = fit(est, train, valid, tcfg)
    scores = novelty_scores(est, test.x)
    positive = test.labels == normal
    auc = roc_auc(scores, positive)
    fpr, tpr = roc_curve(scores, positive)
    digest = config_digest(cfg)
    write_reports(cfg["out"], [MetricReport("auc_roc", auc, len(scores), digest, cfg["seed"])])
    roc_path = cfg["roc"] or str(Path(cfg["out"]).with_suffix(".roc.csv"))
    with open(roc_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        w.writerows([[repr(float(a)), repr(float(b))] for a, b in zip(fpr, tpr)])
    if cfg["checkpoint"]:
        save_checkpoint(est, cfg["checkpoint"])
    write_snapshot(cfg["out"], "novelty", cfg, ds.digest())
    print(f"AUC-ROC {auc:.4f} ({int(positive.sum())} normal, {int((~positive).sum())} novel)")
    return 0


def cmd_interpolate(cfg: dict) -> int:
    est, ds = _load_model(cfg)
    if not est.conditional:
        raise UsageError("interpolation needs a neighbour-conditioned model (ncl or nct)")
    n_entries = len(est.table)
    for key in ("id_a", "id_b"):
        if not 0 <= cfg[key] < n_entries:
            raise BadNeighborhoodId(f"{key} {cfg[key]} outside table of {n_entries} entries")
    rng = np.random.default_rng(cfg["seed"])
    steps = interpolate_neighborhoods(est, est.table.entries[cfg["id_a"]], est.table.entries[cfg["id_b"]],
                                      cfg["samples_per_step"], rng)
    x = np.vstack([s for _, s in steps])
    step_col = np.repeat(np.arange(len(steps)), cfg["samples_per_step"])
    _write_points(cfg["out"], x, {"step": step_col})
    if est.d == 2:
        svg = cfg["svg"] or str(Path(cfg["out"]).with_suffix(".svg"))
        panel_svg(svg, steps, None if ds is None else ds.x)
    write_snapshot(cfg["out"], "interpolate", cfg, None if ds is None else ds.digest())
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "neighbors": cmd_neighbors, "train": cmd_train, "sample": cmd_sample,
            "eval": cmd_eval, "novelty": cmd_novelty, "interpolate": cmd_interpolate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    warnings.formatwarning = lambda msg, cat, *a, **k: f"nbrflow: warning: {msg}\n"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except (UsageError, BadNeighborhoodId, MissingTable, MissingLabels, SizeMismatch) as exc:
        print(f"nbrflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, NonFiniteError, DomainError, FloatingPointError) as exc:
        print(f"nbrflow {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NbrflowError, OSError, ValueError, KeyError, yaml.YAMLError) as exc:
        print(f"nbrflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
