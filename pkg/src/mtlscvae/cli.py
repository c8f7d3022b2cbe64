"""Command-line entry point: simulate -> preprocess -> train -> evaluate/reconstruct/classify.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical failure.
Relative output paths are resolved against ``$MTLSCVAE_ROOT`` when it is set.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from ._random import substream
from .config import ConfigError, RunConfig, resolve
from .errors import DataError, MTLSCVAEError, NumericalError
from .estimator import MTLSCVAE
from .leaksim import (NOMINAL_RATES_MMSCFD, ScenarioSpec, generate_heterogeneity,
                      simulate_many, stability_dt)
from .metrics import confusion, macro_roc, relative_l2, roc_ovr
from .nn import save_checkpoint
from .pipeline import (make_instances, read_dataset, read_manifest, read_series,
                       read_split_arrays, split, write_dataset, write_series)
from .posterior import abs_error_map, classify, summarize

logger = logging.getLogger("mtlscvae")

ROOT_ENV = "MTLSCVAE_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _path(p):
    if p is None:
        return None
    root = os.environ.get(ROOT_ENV)
    if root and not os.path.isabs(p):
        return os.path.join(root, p)
    return p


def _read_json(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed {what} file {path}: {exc}") from None


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _finite_or_none(v):
    return None if v is None or (isinstance(v, float) and not math.isfinite(v)) else v


def write_pgm(path, field):
    """8-bit binary portable graymap, linearly scaled from min (black) to max (white)."""
    field = np.asarray(field, dtype=np.float64)
    lo, hi = float(field.min()), float(field.max())
    scaled = np.zeros(field.shape) if hi == lo else (field - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _write_run_json(out, cfg, stage, extra=None):
    record = {"stage": stage, "version": __version__, "config": cfg.to_dict()}
    record.update(extra or {})
    _write_json(os.path.join(out, "run.json"), record)


def _class_rates(cfg):
    return [cfg.rate_scale * v for v in cfg.rate_values]


# ----------------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------------

def _scenario_list(cfg, scenarios_file):
    if scenarios_file:
        raw = _read_json(scenarios_file, "scenarios")
        if not isinstance(raw, list):
            raise DataError("scenarios file must hold a JSON list")
        items = []
        for k, entry in enumerate(raw):
            try:
                cls = int(entry["rate_class"])
                items.append({
                    "leak_cell": tuple(int(v) for v in entry["leak_cell"]),
                    "rate_class": cls,
                    "rate_value": float(entry.get("rate_value",
                                                  cfg.rate_scale * cfg.rate_values[cls - 1])),
                    "n_steps": int(entry.get("n_steps", cfg.n_steps)),
                })
            except (KeyError, TypeError, ValueError, IndexError) as exc:
                raise DataError(f"scenario {k}: invalid entry ({exc})") from None
        return items
    return [{"leak_cell": tuple(leak), "rate_class": j + 1,
             "rate_value": cfg.rate_scale * v, "n_steps": cfg.n_steps}
            for leak in cfg.leak_cells for j, v in enumerate(cfg.rate_values)]


def run_simulate(cfg, out, scenarios_file=None):
    items = _scenario_list(cfg, scenarios_file)
    keep = tuple(cfg.wells) + tuple(tuple(i["leak_cell"]) for i in items)
    h, w = cfg.grid
    for r, c in keep:
        if not (0 <= r < h and 0 <= c < w):
            raise DataError(f"cell ({r}, {c}) lies outside the {h}x{w} grid")
    geo = generate_heterogeneity(substream(cfg.seed, "sim"), h, w,
                                 corr_len=cfg.corr_len, log_mean=cfg.log_mean,
                                 log_std=cfg.log_std, shale_fraction=cfg.shale_fraction,
                                 porosity_mean=cfg.porosity_mean, keep_active=keep)
    limit = stability_dt(geo, cfg.diffusivity_scale)
    substeps = max(1, math.ceil(cfg.dt / limit))
    specs = [ScenarioSpec(leak_cell=i["leak_cell"], rate_class=i["rate_class"],
                          rate_value=i["rate_value"], n_steps=i["n_steps"],
                          dt=cfg.dt / substeps, diffusivity_scale=cfg.diffusivity_scale,
                          wells=tuple(cfg.wells), seed=cfg.seed, substeps=substeps, p0=cfg.p0)
             for i in items]
    series = simulate_many(geo, specs, max_workers=cfg.workers)
    os.makedirs(out, exist_ok=True)
    write_series(series, out, extra={
        "n_classes": cfg.n_classes, "class_rates": _class_rates(cfg),
        "nominal_rates_mmscfd": list(NOMINAL_RATES_MMSCFD[:cfg.n_classes]),
        "active_cells": int(geo.active_mask.sum()), "frame_interval_days": cfg.dt})
    logger.info("simulated %d scenarios on a %dx%d grid (%d substeps/frame)",
                len(series), h, w, substeps)
    return series


def run_preprocess(cfg, in_dir, out):
    series, raw_manifest = read_series(in_dir)
    n_classes = int(raw_manifest.get("n_classes", cfg.n_classes))
    instances = make_instances(series, cfg.wells, n_classes, cfg.threshold, cfg.downsample)
    sp = split(instances, cfg.split, cfg.seed)
    sp.meta["scenarios"] = [{"id": k, **s.spec.to_dict()} for k, s in enumerate(series)]
    if not instances:
        sp.meta["grid"] = series[0].fields.shape[1:] if series else (0, 0)
    os.makedirs(out, exist_ok=True)
    write_dataset(sp, out, cfg.wells, n_classes,
                  class_rates=raw_manifest.get("class_rates"),
                  extra={"threshold": cfg.threshold,
                         "raw_counts": len(series) and sum(s.fields.shape[0] - 1 for s in series)})
    logger.info("preprocessed %d instances: %s", len(instances), sp.counts())
    return sp


def _estimator_from_cfg(cfg, wells):
    return MTLSCVAE(wells=tuple(wells), n_classes=cfg.n_classes, latent_dim=cfg.latent,
                    alpha=cfg.alpha, beta=cfg.beta, mc_samples=cfg.mc_samples,
                    batch_size=cfg.batch, patience=cfg.patience, max_epochs=cfg.max_epochs,
                    learning_rate=cfg.lr, beta_1=cfg.beta_1, beta_2=cfg.beta_2,
                    epsilon=cfg.adam_eps, n_mc=cfg.n_mc, mc_seed=cfg.mc_seed,
                    random_state=cfg.seed)


HISTORY_FIELDS = ("epoch", "train_total", "train_recon", "train_class", "train_kl",
                  "val_total", "val_recon", "val_class", "val_kl")


def run_train(cfg, data_dir, out):
    manifest = read_manifest(data_dir)
    x_tr, y_tr, m_tr, _ = read_split_arrays(data_dir, "train", manifest)
    x_va, y_va, m_va, _ = read_split_arrays(data_dir, "val", manifest)
    if x_tr.shape[0] == 0 or x_va.shape[0] == 0:
        raise DataError(f"{data_dir}: training and validation splits must be non-empty")
    cfg = cfg if cfg.n_classes == manifest["n_classes"] else \
        RunConfig(**{**cfg.__dict__, "n_classes": manifest["n_classes"]})
    wells = [tuple(w) for w in manifest["wells"]]
    est = _estimator_from_cfg(cfg, wells)
    if est.batch_size > x_tr.shape[0]:
        est.batch_size = x_tr.shape[0]
    os.makedirs(out, exist_ok=True)
    meta = {"data_dir": os.path.relpath(os.path.abspath(data_dir), os.path.abspath(out)),
            "class_rates": manifest.get("class_rates"), "wells": manifest["wells"],
            "inference": {"seed": cfg.seed, "mc_seed": cfg.mc_seed, "n_mc": cfg.n_mc}}
    try:
        est.fit(x_tr, y_tr, m_tr, x_va, y_va, m_va)
    except NumericalError as exc:
        if exc.best_params is not None:
            save_checkpoint(out, exc.best_params, {"aborted": str(exc), **meta})
        raise
    est.save(out, extra_meta=meta)
    _write_csv(os.path.join(out, "history.csv"), HISTORY_FIELDS,
               [[row[k] for k in HISTORY_FIELDS] for row in est.history_])
    logger.info("trained %d epochs; best validation epoch %d", len(est.history_), est.best_epoch_)
    return est


def _model_data_dir(model_dir, est):
    rel = est.meta_.get("data_dir")
    if rel is None:
        raise DataError(f"{model_dir}: checkpoint does not record its data directory; pass --data")
    return os.path.normpath(os.path.join(model_dir, rel))


def run_evaluate(cfg, model_dir, data_dir, split_name, out):
    est = MTLSCVAE.load(model_dir)
    data_dir = data_dir or _model_data_dir(model_dir, est)
    x, y, m, _ = read_split_arrays(data_dir, split_name)
    if x.shape[0] == 0:
        raise DataError(f"split {split_name!r} is empty")
    r = len(est.classes_)
    post = est.predict_posterior(m, n_mc=cfg.n_mc, seed=cfg.effective_mc_seed)
    rel, excluded = relative_l2(post["x_mean"], x, return_excluded=True)
    pred = classify(post["y_mean"])
    cm = confusion(y, pred, r)
    curves = roc_ovr(post["y_samples"], y)
    macro = macro_roc(curves)
    os.makedirs(out, exist_ok=True)
    report = {
        "split": split_name, "n_instances": int(x.shape[0]), "n_mc": cfg.n_mc,
        "relative_l2": _finite_or_none(rel), "relative_l2_excluded": excluded,
        "zero_predictor_relative_l2": 1.0,
        "accuracy": cm.accuracy, "confusion": cm.counts.tolist(),
        "auc": {str(c.class_index): _finite_or_none(c.auc) for c in curves},
        "macro_auc": _finite_or_none(macro.auc),
    }
    _write_json(os.path.join(out, "report.json"), report)
    for c in curves + [macro]:
        name = "macro" if c.class_index == 0 else f"class{c.class_index}"
        _write_csv(os.path.join(out, f"roc_{name}.csv"), ("fpr", "tpr_mean", "tpr_std"),
                   c.to_rows())
    _write_csv(os.path.join(out, "confusion.csv"), ["true\\pred"] + [str(k) for k in est.classes_],
               [[k] + row for k, row in zip(est.classes_.tolist(), cm.counts.tolist())])
    _write_csv(os.path.join(out, "predictions.csv"),
               ["index", "true"] + [f"p{k}" for k in est.classes_] + ["pred", "rel_l2"],
               [[i, int(y[i])] + [float(v) for v in post["y_mean"][i]] + [int(pred[i]),
                 float(np.linalg.norm(post["x_mean"][i] - x[i]) / np.linalg.norm(x[i]))
                 if np.any(x[i]) else ""] for i in range(x.shape[0])])
    logger.info("relative L2 %.4f, accuracy %.4f, macro AUC %.4f", rel, cm.accuracy, macro.auc)
    return report


def _measurements(args, est, split_name="test"):
    """Return ``(m, x_true or None, y_true or None)`` from --m FILE or --instance IDX."""
    if args.m is not None:
        m_path = _path(args.m)
        try:
            if m_path.endswith(".json"):
                m = np.asarray(_read_json(m_path, "measurement"), dtype=np.float32)
            else:
                m = np.loadtxt(m_path, delimiter=",", dtype=np.float32, ndmin=1)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read measurements from {m_path}: {exc}") from None
        return m.reshape(-1), None, None
    data_dir = _path(args.data) if getattr(args, "data", None) else _model_data_dir(args.model, est)
    x, y, m, _ = read_split_arrays(data_dir, split_name)
    idx = args.instance
    if not 0 <= idx < x.shape[0]:
        raise DataError(f"instance {idx} outside the {split_name} split (size {x.shape[0]})")
    return m[idx], x[idx], int(y[idx])


def run_reconstruct(cfg, args, out):
    est = MTLSCVAE.load(args.model)
    m, x_true, _ = _measurements(args, est)
    xs, _ = est.sample(m, n_mc=cfg.n_mc, seed=cfg.effective_mc_seed)
    summ = summarize(xs)
    std = summ.std if summ.std is not None else np.zeros_like(summ.mean)
    os.makedirs(out, exist_ok=True)
    panels = {"mean": summ.mean, "std": std}
    if x_true is not None:
        panels["true"] = x_true
        panels["abs_err"] = abs_error_map(x_true, summ.mean)
    for name, arr in panels.items():
        np.asarray(arr, dtype="<f4").tofile(os.path.join(out, f"{name}.f32"))
        np.savetxt(os.path.join(out, f"{name}.csv"), arr, delimiter=",", fmt="%.8g")
        write_pgm(os.path.join(out, f"{name}.pgm"), arr)
    if cfg.save_samples:
        np.asarray(xs, dtype="<f4").tofile(os.path.join(out, "samples.f32"))
    if x_true is not None:
        h, w = summ.mean.shape
        grid = np.zeros((2 * h + 1, 2 * w + 1))
        for (r0, c0), name in zip(((0, 0), (0, w + 1), (h + 1, 0), (h + 1, w + 1)),
                                  ("true", "mean", "std", "abs_err")):
            a = panels[name]
            span = float(a.max() - a.min())
            grid[r0:r0 + h, c0:c0 + w] = (a - a.min()) / span if span else 0.0
        write_pgm(os.path.join(out, "figure.pgm"), grid)
    summary = {"n_mc": cfg.n_mc, "seed": cfg.effective_mc_seed, "grid": list(summ.mean.shape),
               "measurements": [float(v) for v in m], "instance": None if args.m else args.instance}
    if x_true is not None:
        summary["relative_l2"] = relative_l2([summ.mean], [x_true])
    _write_json(os.path.join(out, "reconstruct.json"), summary)
    return summary


def run_classify(cfg, args, out):
    est = MTLSCVAE.load(args.model)
    m, _, y_true = _measurements(args, est)
    _, ys = est.sample(m, n_mc=cfg.n_mc, seed=cfg.effective_mc_seed)
    summ = summarize(ys, full_cov=True)
    label = int(classify(summ.mean))
    std = summ.std if summ.std is not None else np.zeros_like(summ.mean)
    os.makedirs(out, exist_ok=True)
    classes = est.classes_.tolist()
    _write_csv(os.path.join(out, "class_probs.csv"), ("class", "mean", "std"),
               [[k, float(mu), float(s)] for k, mu, s in zip(classes, summ.mean, std)])
    _write_csv(os.path.join(out, "samples.csv"), ["draw"] + [f"p{k}" for k in classes],
               [[d] + [float(v) for v in row] for d, row in enumerate(ys)])
    result = {"label": label, "true_label": y_true, "mean": summ.mean.tolist(),
              "std": std.tolist(), "n_mc": cfg.n_mc, "seed": cfg.effective_mc_seed,
              "class_rates": est.meta_.get("class_rates")}
    _write_json(os.path.join(out, "classify.json"), result)
    return result


def run_pipeline(cfg, out):
    raw, data, model = (os.path.join(out, d) for d in ("raw", "data", "model"))
    os.makedirs(out, exist_ok=True)
    run_simulate(cfg, raw)
    run_preprocess(cfg, raw, data)
    run_train(cfg, data, model)
    report = run_evaluate(cfg, model, data, "test", os.path.join(out, "eval"))
    ns = argparse.Namespace(model=model, m=None, data=data, instance=cfg.instance)
    figures = os.path.join(out, "figures")
    run_reconstruct(cfg, ns, figures)
    run_classify(cfg, ns, figures)
    return report


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="flat YAML key: value file; flags override it")
    p.add_argument("--preset", choices=("desk", "paper-shape"))
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_sim_flags(p):
    p.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--n-steps", type=int)
    p.add_argument("--dt", type=float, help="frame interval in days")
    p.add_argument("--rate-scale", type=float)
    p.add_argument("--diffusivity-scale", type=float)
    p.add_argument("--shale-fraction", type=float)
    p.add_argument("--corr-len", type=float)
    p.add_argument("--workers", type=int)


def _add_pre_flags(p):
    p.add_argument("--threshold", type=float)
    p.add_argument("--wells", dest="wells_file", help="JSON list of [row, col] well cells")
    p.add_argument("--split", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--downsample", action="store_true", default=None,
                   help="apply every-third-point downsampling (raw 486x478 grids)")


def _add_train_flags(p):
    p.add_argument("--latent", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mc-samples", type=int)


def _add_mc_flags(p):
    p.add_argument("--n-mc", type=int)
    p.add_argument("--mc-seed", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="mtlscvae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic pressure series")
    _add_common(p)
    _add_sim_flags(p)
    p.add_argument("--scenarios", help="JSON list of {leak_cell, rate_class[, n_steps, rate_value]}")
    p.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", help="build the (x, y, m) dataset from raw series")
    _add_common(p)
    _add_pre_flags(p)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the multi-task SCVAE")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="relative L2, confusion matrix and ROC on a split")
    _add_common(p)
    _add_mc_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="defaults to the data directory recorded in the checkpoint")
    p.add_argument("--split", dest="split_name", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="defaults to <model>/../eval")

    for name, helptext in (("reconstruct", "posterior field mean/std for one measurement"),
                           ("classify", "posterior class probabilities for one measurement")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        _add_mc_flags(p)
        p.add_argument("--model", required=True)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--m", help="measurement file (.json list or comma-separated values)")
        src.add_argument("--instance", type=int, help="index into the test split")
        p.add_argument("--data", help="dataset for --instance; defaults to the checkpoint's")
        p.add_argument("--out", required=True)
        if name == "reconstruct":
            p.add_argument("--save-samples", action="store_true", default=None)

    p = sub.add_parser("pipeline", help="simulate, preprocess, train and evaluate in one run")
    _add_common(p)
    _add_sim_flags(p)
    _add_pre_flags(p)
    _add_train_flags(p)
    _add_mc_flags(p)
    p.add_argument("--scenarios", help=argparse.SUPPRESS)
    p.add_argument("--out", required=True)
    return parser


_NON_CONFIG = {"command", "config", "verbose", "out", "in_dir", "data", "model", "m",
               "scenarios", "wells_file", "split_name"}


def _flags_from_args(args):
    flags = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG and v is not None}
    if getattr(args, "wells_file", None):
        flags["wells"] = _read_json(_path(args.wells_file), "wells")
    return flags


def _recorded_inference(model_dir):
    """Seed and MC settings stored by ``train``, so a model path alone reproduces a report."""
    path = os.path.join(model_dir, "model.json")
    try:
        with open(path, encoding="utf-8") as fh:
            meta = json.load(fh).get("meta", {})
    except (OSError, ValueError):
        return None  # load_checkpoint reports the problem with full context
    return meta.get("inference")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cmd = args.command
        base = None
        if cmd in ("evaluate", "reconstruct", "classify"):
            args.model = _path(args.model)
            base = _recorded_inference(args.model)
        try:
            cfg = resolve(_flags_from_args(args), _path(args.config), base)
        except ConfigError as exc:
            parser.error(str(exc))
        if cmd == "simulate":
            out = _path(args.out)
            run_simulate(cfg, out, _path(args.scenarios))
        elif cmd == "preprocess":
            out = _path(args.out)
            run_preprocess(cfg, _path(args.in_dir), out)
        elif cmd == "train":
            out = _path(args.out)
            run_train(cfg, _path(args.data), out)
        elif cmd == "evaluate":
            out = _path(args.out) or os.path.join(os.path.dirname(os.path.abspath(args.model)), "eval")
            run_evaluate(cfg, args.model, _path(args.data), args.split_name, out)
        elif cmd == "reconstruct":
            out = _path(args.out)
            run_reconstruct(cfg, args, out)
        elif cmd == "classify":
            out = _path(args.out)
            run_classify(cfg, args, out)
        elif cmd == "pipeline":
            out = _path(args.out)
            run_pipeline(cfg, out)
        _write_run_json(out, cfg, cmd)
    except NumericalError as exc:
        print(f"mtlscvae: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"mtlscvae: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MTLSCVAEError as exc:
        print(f"mtlscvae: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"mtlscvae: invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
