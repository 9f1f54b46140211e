"""Command-line entry point: ``amp <subcommand> --config FILE [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, parse_config
from .diagnostics import (
    diagnose,
    distribution_bounds_suite,
    random_linear_model,
    sensitivity_bound_suite,
    reachability_suite,
    verify_bound,
)
from .graphs import Dataset, build_dataset
from .model import AdaptiveModel
from .train import evaluate, fit, history_csv, mse_metrics
from .graphs import GraphBatch

SUBCOMMANDS = ("generate", "train", "evaluate", "diagnose", "gridsearch", "verify-theorems")

# Tests may install ``callable(graphs) -> predictions`` to bypass the model in ``evaluate``.
PREDICTION_HOOK = None


def version_stamp() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _stamp(out: Path, cfg: RunConfig | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        _write_json(out / "config.json", cfg.resolved())
    (out / "VERSION").write_text(version_stamp() + "\n")


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data.path:
        ds = Dataset.load(cfg.data.path)
        if ds.task.kind != cfg.task:
            raise ConfigError([f"data.path: dataset task {ds.task.kind!r} != config task {cfg.task!r}"])
        return ds
    return build_dataset(cfg.task, cfg.sizes, cfg.data.generators, cfg.data_seed, tuple(cfg.data.n_range))


def build_model(cfg: RunConfig, seed: int | None = None) -> AdaptiveModel:
    return AdaptiveModel(cfg.model_spec(seed), cfg.model.depth.build(), cfg.model.prior.build())


# --- subcommands ------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out: Path) -> int:
    ds = build_dataset(cfg.task, cfg.sizes, cfg.data.generators, cfg.data_seed, tuple(cfg.data.n_range))
    ds.save(out)
    _stamp(out, cfg)
    print(f"wrote {sum(ds.sizes)} graphs ({'/'.join(map(str, ds.sizes))}) to {out}")
    return 0


def train_once(cfg: RunConfig, out: Path, seed: int, dataset: Dataset | None = None, quiet: bool = False) -> dict:
    ds = dataset or load_dataset(cfg)
    model = build_model(cfg, seed)
    log = None if quiet else (lambda msg: print(msg, file=sys.stderr))
    result = fit(model, ds.train, ds.val, cfg.train_config(seed), log=log)
    best = AdaptiveModel.from_dict(result.best_checkpoint)
    test = evaluate(best, ds.test)
    out.mkdir(parents=True, exist_ok=True)
    best.save(out / "checkpoint.json", {k: v for k, v in result.best_checkpoint.items()
                                         if k in ("epoch", "val_mse", "optimizer", "rng_state")})
    (out / "history.csv").write_text(history_csv(result.history, test["mse"]))
    metrics = {
        "seed": seed,
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "val_mse": result.best_val_mse,
        "test_mse": test["mse"],
        "test_log10_mse": test["log10_mse"],
        "L_hat": best.support,
        "stopped_early": result.stopped_early,
        "aborted": result.aborted,
    }
    _write_json(out / "metrics.json", metrics)
    _stamp(out, cfg)
    return metrics


def cmd_train(cfg: RunConfig, out: Path) -> int:
    ds = load_dataset(cfg)
    runs = []
    for r in range(cfg.train.repeats):
        seed = cfg.seed + r
        target = out if cfg.train.repeats == 1 else out / f"run{r}"
        runs.append(train_once(cfg, target, seed, ds))
        print(f"seed {seed}: test log10-MSE {runs[-1]['test_log10_mse']:.4f}  L_hat {runs[-1]['L_hat']}")
    if cfg.train.repeats > 1:
        logs = [m["test_log10_mse"] for m in runs]
        _write_json(out / "summary.json", {"runs": runs, "test_log10_mse_mean": float(np.mean(logs)),
                                            "test_log10_mse_std": float(np.std(logs))})
        _stamp(out, cfg)
    return 0 if all(m["aborted"] is None for m in runs) else 1


def cmd_evaluate(cfg: RunConfig, out: Path) -> int:
    ds = load_dataset(cfg)
    if PREDICTION_HOOK is None:
        if cfg.checkpoint is None:
            raise ConfigError(["checkpoint: evaluate needs a checkpoint path"])
        model = AdaptiveModel.load(cfg.checkpoint)
    metrics = {}
    for split in ("train", "val", "test"):
        graphs = getattr(ds, split)
        if PREDICTION_HOOK is not None:
            metrics[split] = mse_metrics(PREDICTION_HOOK(graphs), GraphBatch.from_graphs(graphs).targets)
        else:
            metrics[split] = evaluate(model, graphs)
    _stamp(out, cfg)
    _write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics["test"]))
    return 0


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def cmd_diagnose(cfg: RunConfig, out: Path) -> int:
    if cfg.checkpoint is None:
        raise ConfigError(["checkpoint: diagnose needs a checkpoint path"])
    ds = load_dataset(cfg)
    model = AdaptiveModel.load(cfg.checkpoint)
    graphs = getattr(ds, cfg.diagnose.split)
    report = diagnose(model, graphs, cfg.diagnose.max_graphs, cfg.diagnose.max_nodes, cfg.seed)
    _stamp(out, cfg)
    _write_csv(out / "diagnostics.csv", report.rows())
    rng = np.random.default_rng([cfg.seed, 7])
    check = verify_bound(random_linear_model(rng, 5, 2, 3), rng.normal(size=(5, 2)))
    _write_csv(out / "bound_table.csv", check.table)
    print(f"wrote {len(report.rows())} layer rows to {out / 'diagnostics.csv'}")
    return 0


def _grid_label(cell: RunConfig) -> dict:
    m = cell.model
    return {"dim": m.dim, "depth": m.depth.label(), "prior": m.prior.kind, "filter": m.filter_mode}


def _run_cell(args) -> dict:
    index, cell_data, out = args
    cell = RunConfig.model_validate(cell_data)
    metrics = train_once(cell, Path(out) / f"cell{index:03d}", cell.seed, quiet=True)
    return {"cell": index, **_grid_label(cell), **{k: metrics[k] for k in ("val_mse", "test_mse", "L_hat")}}


def select_cell(rows: list[dict]) -> dict:
    """Lowest validation MSE; ties go to the smaller depth, then the earlier cell."""
    return min(rows, key=lambda r: (r["val_mse"] if math.isfinite(r["val_mse"]) else math.inf, r["L_hat"], r["cell"]))


def cmd_gridsearch(cfg: RunConfig, out: Path) -> int:
    cells = cfg.grid_cells()
    workers = max(1, int(os.environ.get("AMP_THREADS", "1")))
    jobs = [(i, c.model_dump(), str(out)) for i, c in enumerate(cells)]
    if workers == 1:
        rows = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    rows.sort(key=lambda r: r["cell"])
    _stamp(out, cfg)
    _write_csv(out / "summary.csv", rows)
    best = select_cell(rows)
    _write_json(out / "best.json", best)
    print(f"{len(rows)} cells; best cell {best['cell']} val MSE {best['val_mse']:.5f}")
    return 0


def cmd_verify(seed: int, out: Path | None) -> int:
    started = time.perf_counter()
    dist = distribution_bounds_suite(seed)
    t1 = sensitivity_bound_suite(seed)
    t2 = reachability_suite(seed)
    report = {
        "seed": seed,
        "distribution_bounds": {"checks": len(dist), "failures": sum(not r["ok"] for r in dist)},
        "sensitivity_bound": {"models": len(t1), "violations": sum(c.violations for c in t1),
                              "max_ratio": max(c.max_ratio for c in t1)},
        "reachability": {"checks": len(t2), "failures": sum(not r["ok"] for r in t2)},
        "seconds": time.perf_counter() - started,
    }
    ok = (report["distribution_bounds"]["failures"] == 0 and report["sensitivity_bound"]["violations"] == 0
          and report["reachability"]["failures"] == 0)
    report["passed"] = ok
    for name in ("distribution_bounds", "sensitivity_bound", "reachability"):
        part = report[name]
        bad = part.get("failures", part.get("violations"))
        print(f"{'PASS' if bad == 0 else 'FAIL'} {name}: {bad} failing of {part.get('checks', part.get('models'))}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "verify.json", report)
        (out / "VERSION").write_text(version_stamp() + "\n")
    return 0 if ok else 1


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amp", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default=None, help="artifact directory (default: runs/<command>)")
        p.add_argument("--allow-offgrid", action="store_true", help="permit embedding dims outside 10/20/30")
        if name in ("evaluate", "diagnose"):
            p.add_argument("--checkpoint", help="override the config checkpoint path")
        if name in ("train", "evaluate", "diagnose", "gridsearch"):
            p.add_argument("--data", help="override data.path with a generated dataset directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out or f"runs/{args.command}")
    try:
        if args.command == "verify-theorems":
            seed = args.seed
            if seed is None and args.config:
                seed = parse_config(args.config, {"allow_offgrid": True}).seed
            if seed is None:
                print("error: verify-theorems needs --seed or a config with a seed", file=sys.stderr)
                return 2
            return cmd_verify(seed, out)
        overrides = {"seed": args.seed}
        if args.allow_offgrid:
            overrides["allow_offgrid"] = True
        if getattr(args, "checkpoint", None):
            overrides["checkpoint"] = args.checkpoint
        cfg = parse_config(args.config, overrides)
        if getattr(args, "data", None):
            cfg = parse_config({**cfg.resolved(), "data": {**cfg.resolved()["data"], "path": args.data}})
        handler = {
            "generate": cmd_generate,
            "train": cmd_train,
            "evaluate": cmd_evaluate,
            "diagnose": cmd_diagnose,
            "gridsearch": cmd_gridsearch,
        }[args.command]
        return handler(cfg, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
