"""Command-line entry point: ``jaclab {collect,train,eval,analyze,demo}``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

from . import experiment as ex
from .collection import export_csv, load_dataset, save_dataset
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .neural import TrainingError, save_model

log = logging.getLogger("jaclab")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    if getattr(args, "seed_override", None) is not None:
        cfg.data["seeds"] = [args.seed_override]
    return cfg


def _out_dir(args, cfg) -> Path:
    return Path(args.out if args.out else cfg.data["output_dir"])


def cmd_collect(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        path = ex.dataset_path(out, seed)
        if path.exists() and not args.force:
            raise UsageError(f"{path} exists; pass --force to overwrite")
        t0 = time.perf_counter()
        ds = ex.collect_for_seed(cfg, seed)
        save_dataset(path, ds)
        if args.csv:
            export_csv(path.with_suffix(".csv"), ds)
        print(f"collected {len(ds)} samples ({ds.n_traj} x {ds.traj_len}) env={cfg.env.value} "
              f"seed={seed} -> {path} [{time.perf_counter() - t0:.1f}s]")
    return EXIT_OK


def _write_log(path: Path, name: str, beta, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimator", "beta", "epoch", "train_loss", "val_loss"])
        for epoch, tr, va in history:
            w.writerow([name, ex.fmt(beta) if beta is not None else "", epoch, ex.fmt(tr), ex.fmt(va)])


def _train_one(cfg, name, ds, seed, model_file: Path, force: bool) -> Path:
    if model_file.exists() and not force:
        raise UsageError(f"{model_file} exists; pass --force to retrain")
    t0 = time.perf_counter()
    res = ex.train_estimator(cfg, name, ds, seed,
                             on_epoch=lambda e, tr, va: log.info("%s epoch %d train %.4g val %.4g",
                                                                  name, e, tr, va))
    model_file.parent.mkdir(parents=True, exist_ok=True)
    save_model(model_file, res.model)
    beta = cfg.estimators[name].get("beta")
    _write_log(model_file.with_suffix(".log.csv"), name, beta, res.history)
    print(f"trained {name} seed={seed}: best epoch {res.best_epoch}, val loss "
          f"{res.best_val_loss:.4g} -> {model_file} [{time.perf_counter() - t0:.1f}s]")
    return model_file


def _trainable(cfg, requested) -> list[str]:
    if requested:
        for name in requested:
            if name not in cfg.estimators:
                raise UsageError(f"unknown estimator '{name}'")
            if cfg.estimators[name]["type"] not in ex.NEURAL_TYPES:
                raise UsageError(f"estimator '{name}' is not trainable")
        return list(requested)
    return [n for n in cfg.eval_estimators() if cfg.estimators[n]["type"] in ex.NEURAL_TYPES]


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    names = _trainable(cfg, args.estimator)
    for seed in cfg.seeds:
        ds_file = Path(args.dataset) if args.dataset else ex.dataset_path(out, seed)
        if not ds_file.exists():
            raise ex.MissingInputError(f"missing dataset file {ds_file}")
        ds = load_dataset(ds_file)
        try:
            ex.check_dataset(cfg, ds)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        for name in names:
            _train_one(cfg, name, ds, seed, ex.model_path(out, name, seed), args.force)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    models = Path(args.models) if args.models else out
    names = args.estimator or None
    if names:
        unknown = [n for n in names if n not in cfg.estimators]
        if unknown:
            raise UsageError(f"unknown estimator(s): {', '.join(unknown)}")
    t0 = time.perf_counter()
    traces = ex.evaluate(cfg, models, args.jobs, names)
    paths = ex.write_results(cfg, traces, out)
    _print_summary(paths["summary"])
    print(f"{len(traces)} trajectories -> {out} [{time.perf_counter() - t0:.1f}s]")
    return EXIT_OK


def _print_summary(path: Path) -> None:
    for line in path.read_text().splitlines():
        if not line.startswith("#"):
            print("  " + line)


def cmd_analyze(args) -> int:
    paths = ex.analyze(args.results, args.out)
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


DEMO_CONFIG = {
    "env": "planar2",
    "seeds": [0],
    "collection": {"n_traj": 100, "traj_len": 100},
    "estimators": {
        "Broyden": {},
        "LL-KNN": {},
        "Tanh-NK": {},
        "TJ": {},
    },
    "evaluation": {"targets_per_seed": 50},
}


def cmd_demo(args) -> int:
    cfg = load_config(args.config) if args.config else parse_config(DEMO_CONFIG, source="<demo>")
    if args.seed_override is not None:
        cfg.data["seeds"] = [args.seed_override]
    out = Path(args.out or "demo_out")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    for seed in cfg.seeds:
        ds = ex.collect_for_seed(cfg, seed)
        save_dataset(ex.dataset_path(out, seed), ds)
        print(f"collected {len(ds)} samples seed={seed}")
        for name in _trainable(cfg, None):
            _train_one(cfg, name, ds, seed, ex.model_path(out, name, seed), True)
    traces = ex.evaluate(cfg, out, args.jobs)
    paths = ex.write_results(cfg, traces, out)
    ex.analyze(out)
    _print_summary(paths["summary"])
    print(f"demo finished in {time.perf_counter() - t0:.1f}s -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jaclab", description="Jacobian estimation and control lab")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON experiment config (defaults: planar2)")
        sp.add_argument("--out", help="output directory (default: config output_dir)")
        if seed:
            sp.add_argument("--seed-override", type=int, help="run a single seed instead")

    sp = sub.add_parser("collect", help="roll out exploration trajectories")
    common(sp)
    sp.add_argument("--force", action="store_true", help="overwrite existing datasets")
    sp.add_argument("--csv", action="store_true", help="also export the dataset as CSV")
    sp.set_defaults(func=cmd_collect)

    sp = sub.add_parser("train", help="train neural estimators")
    common(sp)
    sp.add_argument("--dataset", help="dataset file (default: <out>/dataset_s<seed>.njds)")
    sp.add_argument("--estimator", action="append", help="estimator name (repeatable)")
    sp.add_argument("--force", action="store_true", help="overwrite existing models")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="closed-loop evaluation")
    common(sp)
    sp.add_argument("--models", help="directory with models and datasets (default: --out)")
    sp.add_argument("--estimator", action="append", help="restrict to estimator (repeatable)")
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze", help="derive analysis tables from eval results")
    sp.add_argument("results", help="directory containing steps.csv")
    sp.add_argument("--out", help="output directory (default: the results directory)")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("demo", help="planar collect/train/eval/analyze at smoke scale")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    sp.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ex.MissingInputError, TrainingError, OSError, ValueError, RuntimeError,
            ArithmeticError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
