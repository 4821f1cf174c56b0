"""Command line entry point: ``dwcca {gen,train,eval,analyze,gradcheck}``.

Every invocation writes into a fresh directory under ``--out`` (a ``-N``
suffix is added on collision) holding its outputs and one ``manifest.txt``.
``eval`` and ``analyze`` write their directories inside the run directory
they read. ``DWCCA_THREADS`` caps BLAS threads.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    DEFAULT_K_GRID,
    class_cov_eigenspectra,
    classwise_f1,
    export_pca_embedding,
    knn_curve,
)
from .config import load_model_config
from .data import SPLITS, ShiftSpec, concatenate, load_dataset, make_shifted_gaussians, save_dataset, stratified_folds
from .errors import ClassCountMismatch, DwccaError
from .gradcheck import CHECKS, run_checks
from .train import (
    TrainConfig,
    accuracy,
    cross_validate,
    ensemble_average,
    model_inputs,
    read_fold,
    write_fold,
)

log = logging.getLogger("dwcca")


class UsageError(Exception):
    pass


def fresh_dir(parent, name):
    parent = Path(parent)
    parent.mkdir(parents=True, exist_ok=True)
    path = parent / name
    n = 1
    while path.exists():
        path = parent / f"{name}-{n}"
        n += 1
    path.mkdir()
    return path


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(run_dir, argv, seed, configs, started):
    """Plain-text manifest: command line, seed, config snapshots, output hashes, timestamps."""
    run_dir = Path(run_dir)
    lines = [
        f"dwcca_version: {__version__}",
        f"command: {' '.join(argv)}",
        f"seed: {seed}",
        f"started: {started}",
        f"finished: {_dt.datetime.now(_dt.timezone.utc).isoformat()}",
    ]
    for name, cfg in configs.items():
        lines.append(f"config.{name}: {json.dumps(cfg, sort_keys=True)}")
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.txt":
            lines.append(f"sha256 {p.relative_to(run_dir).as_posix()}: {_sha256(p)}")
    (run_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args, argv):
    started = _now()
    spec = ShiftSpec() if args.spec == "default" else ShiftSpec.load(args.spec)
    if args.seed is not None:
        spec = ShiftSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    splits = make_shifted_gaussians(spec)
    out = fresh_dir(args.out, args.name)
    for name, batch in zip(SPLITS, splits):
        save_dataset(batch, out / f"{name}.dwds")
    (out / "spec.snapshot").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    write_manifest(out, argv, spec.seed, {"spec": spec.to_dict()}, started)
    print(out)
    return 0


def _load_split(data_dir, name):
    path = Path(data_dir) / f"{name}.dwds"
    if not path.exists():
        raise UsageError(f"missing dataset file {path}")
    return load_dataset(path)


def cmd_train(args, argv):
    started = _now()
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise UsageError(f"data directory {data_dir} does not exist")
    model_cfg = load_model_config(args.model)
    if args.no_dwcca:
        model_cfg = model_cfg.without_dwcca()
    dev = concatenate(_load_split(data_dir, "train"), _load_split(data_dir, "val"))
    if dev.num_classes != model_cfg.classes:
        raise ClassCountMismatch(f"data has {dev.num_classes} classes, model outputs {model_cfg.classes}")
    train_cfg = TrainConfig(
        initial_lr=args.lr,
        batch_size=args.batch_size,
        max_patience=args.patience,
        alpha=args.alpha,
        max_epochs=args.epochs,
        seed=args.seed,
    )
    folds = stratified_folds(dev, args.folds, args.seed)
    results = cross_validate(model_cfg, folds, train_cfg, calibrate=True, parallel=args.parallel_folds)
    out = fresh_dir(args.out, args.name)
    (out / "model.snapshot").write_text(json.dumps(model_cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    for res in results:
        write_fold(res, out / f"fold{res.fold + 1}", model_cfg, train_cfg)
        print(f"fold{res.fold + 1} val_acc={res.val_accuracy:.4f} epochs={len(res.metrics)}")
    write_manifest(out, argv, args.seed, {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, started)
    print(out)
    return 0


def _fold_dirs(run_dir):
    run_dir = Path(run_dir)
    dirs = sorted(p for p in run_dir.glob("fold*") if p.is_dir() and p.name[4:].isdigit())
    if not dirs:
        raise UsageError(f"{run_dir} contains no fold directories")
    return sorted(dirs, key=lambda p: int(p.name[4:]))


def cmd_eval(args, argv):
    started = _now()
    test_path = Path(args.test)
    if not test_path.exists():
        raise UsageError(f"test set {test_path} does not exist")
    test = load_dataset(test_path)
    folds = [read_fold(d) for d in _fold_dirs(args.run_dir)]
    models = [m for m, _, _ in folds]
    classes = models[0].classes
    if test.num_classes != classes:
        raise ClassCountMismatch(f"test set has {test.num_classes} classes, models output {classes}")
    calibrators = None
    if args.calibrated:
        calibrators = [c for _, c, _ in folds]
        if any(c is None for c in calibrators):
            raise UsageError("run directory lacks calibrators; retrain to use --calibrated")
    x = model_inputs(models[0], test)
    probs = ensemble_average(models, x, calibrators)
    pred = np.argmax(probs, axis=1)
    f1 = classwise_f1(test.labels, pred, classes)
    fold_acc = [
        accuracy(c.transform(m.predict_proba(x)) if calibrators else m.predict_proba(x), test.labels)
        for m, c in zip(models, calibrators or [None] * len(models))
    ]
    result = {
        "test": test_path.name,
        "calibrated": bool(args.calibrated),
        "accuracy": accuracy(probs, test.labels),
        "fold_accuracies": fold_acc,
        "mean_fold_accuracy": float(np.mean(fold_acc)),
        "macro_f1": f1.macro,
        "f1": [float(v) for v in f1.f1],
    }
    name = f"eval-{test_path.stem}" + ("-calibrated" if args.calibrated else "")
    out = fresh_dir(args.run_dir, name)
    (out / "eval.json").write_text(json.dumps(result, indent=2) + "\n")
    f1.save(out)
    write_manifest(out, argv, None, {}, started)
    print(f"accuracy={result['accuracy']:.4f} macro_f1={result['macro_f1']:.4f}")
    print(out)
    return 0


def cmd_analyze(args, argv):
    started = _now()
    fold_dir = _fold_dirs(args.run_dir)[args.fold - 1] if args.fold else _fold_dirs(args.run_dir)[0]
    model, _, _ = read_fold(fold_dir)
    train = _load_split(args.data, "train")
    target = _load_split(args.data, args.split)
    for ds in (train, target):
        if ds.num_classes != model.classes:
            raise ClassCountMismatch(f"dataset has {ds.num_classes} classes, model outputs {model.classes}")
    e_train = model.embed(model_inputs(model, train))
    e_eval = model.embed(model_inputs(model, target))
    out = fresh_dir(args.run_dir, f"analysis-{args.which}-{args.split}")
    if args.which == "eigen":
        report = class_cov_eigenspectra(e_eval, target.labels)
        report.save(out)
        print(f"max eigenvalue={report.max_eigenvalue:.6g}")
    elif args.which == "knn":
        ks = [int(k) for k in args.k.split(",")] if args.k else DEFAULT_K_GRID
        curve = knn_curve(e_train, train.labels, e_eval, target.labels, ks, metric=args.metric)
        curve.save(out)
        for k, a in zip(curve.ks, curve.accuracies):
            print(f"k={k} accuracy={a:.4f}")
    else:
        export_pca_embedding(e_train, train.labels, e_eval, target.labels, out)
    write_manifest(out, argv, None, {"fold": fold_dir.name, "split": args.split}, started)
    print(out)
    return 0


def cmd_gradcheck(args, argv):
    ops = args.ops.split(",") if args.ops else None
    for op in ops or []:
        if op not in CHECKS:
            raise UsageError(f"unknown op {op!r}; choose from {', '.join(CHECKS)}")
    lines = ["op,seed,max_rel_err,tol,pass"]
    failed = 0
    for report in run_checks(args.seeds, ops):
        lines.append(report.csv_row())
        failed += not report.passed
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="dwcca", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the synthetic shifted-Gaussian datasets")
    g.add_argument("--spec", default="default", help="'default' or a TOML/JSON ShiftSpec file")
    g.add_argument("--seed", type=int, default=None, help="override the ShiftSpec seed")
    g.add_argument("--out", "--out-dir", dest="out", default="runs")
    g.add_argument("--name", default="data")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="k-fold training on train+val of a dataset directory")
    t.add_argument("--model", required=True, help="model config (TOML or JSON)")
    t.add_argument("--data", required=True, help="directory with train.dwds and val.dwds")
    t.add_argument("--folds", type=int, default=4)
    t.add_argument("--seed", type=int, default=0, help="master seed")
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch-size", type=int, default=75)
    t.add_argument("--patience", type=int, default=20)
    t.add_argument("--epochs", type=int, default=500)
    t.add_argument("--alpha", type=float, default=None, help="override the dwcca alpha")
    t.add_argument("--no-dwcca", action="store_true", help="drop the dwcca layer (vanilla model)")
    t.add_argument("--parallel-folds", type=int, default=1)
    t.add_argument("--out", default="runs")
    t.add_argument("--name", default="run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="ensemble evaluation of a trained run")
    e.add_argument("run_dir")
    e.add_argument("--test", required=True, help="DWDS test set")
    e.add_argument("--calibrated", action="store_true", help="apply per-fold late-fusion calibrators")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="representation analysis of one fold model")
    a.add_argument("run_dir")
    a.add_argument("--data", required=True, help="dataset directory (train.dwds is the reference set)")
    a.add_argument("--which", choices=("eigen", "knn", "pca"), required=True)
    a.add_argument("--split", default="test_shifted", choices=SPLITS)
    a.add_argument("--fold", type=int, default=None, help="1-based fold number (default 1)")
    a.add_argument("--k", default=None, help="comma-separated k values for knn")
    a.add_argument("--metric", default="euclidean", choices=("euclidean", "cosine"))
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--ops", default=None, help=f"comma-separated subset of {','.join(CHECKS)}")
    c.add_argument("--out", default=None, help="also write the CSV here")
    c.set_defaults(func=cmd_gradcheck)
    return p


def _thread_limit():
    n = os.environ.get("DWCCA_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args, ["dwcca", *argv])
    except ClassCountMismatch as exc:
        print(f"error: ClassCountMismatch: {exc}", file=sys.stderr)
        return 3
    except (DwccaError, UsageError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
