"""Command-line entry point: prepare, train, eval, check, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .checks import CHECKS, run_checks
from .data import (
    DataError,
    dataset_stats,
    filter_min_interactions,
    leave_one_out_split,
    load_interactions,
    load_log,
    save_log,
)
from .evaluation import evaluate, popularity_scorer, random_scorer
from .generators import ConfigError
from .metrics import table_rows
from .model import GenAttModel, ModelConfig, SchemaError, load_checkpoint, save_checkpoint
from .synthetic import synthetic_log
from .training import TrainConfig, fit

log = logging.getLogger("genatt")


class UsageError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # model
    d: int = 64
    n: int = 50
    L: int = 2
    H: int = 2
    d_h: int = 0
    T: int = 0
    beta_start: float = 1e-4
    beta_end: float = 0.02
    gamma: float = 1.0
    dropout: float = 0.4
    mode: str = "vae"
    seed: int = 0
    dtype: str = "float64"
    d_t: int = 16
    diff_hidden: int = 0
    # run
    data: str = ""
    out: str = "out"
    checkpoint: str = ""
    interactions: str = ""
    categories: str = ""
    synthetic: str = ""
    min_interactions: int = 10
    batch_size: int = 128
    max_epochs: int = 500
    lr: float = 1e-3
    patience: int = 20
    eval_samples: int = 1
    eval_seed: int = 0
    exclude_history: bool = True

    def model_config(self, num_items: int) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)} - {"num_items"}
        return ModelConfig(num_items=num_items, **{k: getattr(self, k) for k in names})

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            eval_seed=self.eval_seed,
            eval_samples=self.eval_samples,
            exclude_history=self.exclude_history,
        )


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _coerce(key: str, value: str):
    default = _FIELDS[key].default
    if isinstance(default, bool):
        return _parse_bool(value)
    try:
        return type(default)(value)
    except ValueError:
        raise UsageError(f"bad value for {key}: {value!r}") from None


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment; unknown keys rejected."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def write_config(cfg: ExperimentConfig, path) -> None:
    lines = [f"{k} = {v}" for k, v in sorted(dataclasses.asdict(cfg).items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in _FIELDS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return ExperimentConfig(**values)


# ---------------------------------------------------------------------------
# commands


def _load_prepared(cfg: ExperimentConfig):
    if not cfg.data:
        raise UsageError("--data DIR (output of `genatt prepare`) is required")
    path = Path(cfg.data) / "log.json"
    if not path.exists():
        raise FileNotFoundError(f"prepared log not found: {path}")
    return load_log(path)


def _parse_synthetic(spec: str) -> dict:
    out = {}
    for part in spec.replace(",", " ").split():
        key, _, value = part.partition("=")
        if key not in ("users", "items", "cats", "seed") or not value:
            raise UsageError(f"bad --synthetic entry {part!r}; use users=.. items=.. cats=.. seed=..")
        out[key] = int(value)
    return out


def cmd_prepare(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    if cfg.synthetic:
        raw = synthetic_log(**_parse_synthetic(cfg.synthetic))
    elif cfg.interactions:
        for p in (cfg.interactions, cfg.categories):
            if p and not Path(p).exists():
                raise FileNotFoundError(f"input file not found: {p}")
        raw = load_interactions(cfg.interactions, cfg.categories or None)
    else:
        raise UsageError("prepare needs --interactions FILE or --synthetic SPEC")
    filtered = filter_min_interactions(raw, cfg.min_interactions)
    split = leave_one_out_split(filtered, cfg.n)
    out.mkdir(parents=True, exist_ok=True)
    save_log(filtered, out / "log.json")
    (out / "split.json").write_text(json.dumps(split.manifest(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    stats = {"raw": dataset_stats(raw), "filtered": dataset_stats(filtered), "skipped_users": split.skipped}
    (out / "stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    write_config(cfg, out / "config.resolved")
    print(json.dumps(stats["filtered"], sort_keys=True))
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    data = _load_prepared(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.resolved")
    split = leave_one_out_split(data, cfg.n)
    model = GenAttModel(cfg.model_config(data.num_items))
    result = fit(model, split, cfg.train_config(), log_path=out / "train_log.csv")
    save_checkpoint(model, out / "checkpoint")
    print(f"best epoch {result.best_epoch}  val ndcg@20 {result.best_metric:.4f}  epochs run {len(result.log)}")
    return 0


def cmd_eval(cfg: ExperimentConfig, baselines: bool = False) -> int:
    data = _load_prepared(cfg)
    out = Path(cfg.out)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "checkpoint"
    model = load_checkpoint(ckpt, expect=cfg.model_config(data.num_items))
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.resolved")
    split = leave_one_out_split(data, cfg.n)
    table = evaluate(model, split.test, data, users=split.test_users, exclude_history=cfg.exclude_history,
                     seed=cfg.eval_seed, samples=cfg.eval_samples)
    report = {"mode": model.config.mode, "users": len(split.test), "metrics": table}
    if baselines:
        counts = np.bincount(np.concatenate([s.targets for s in split.train]), minlength=data.num_items + 1)[1:]
        report["baselines"] = {
            "popularity": evaluate(popularity_scorer(counts), split.test, data, exclude_history=cfg.exclude_history),
            "random": evaluate(random_scorer(data.num_items, cfg.eval_seed), split.test, data, exclude_history=cfg.exclude_history),
        }
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "N", "value"])
        for name, N, value in table_rows(table):
            w.writerow([name, N, repr(value)])
    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for name, N, value in table_rows(table):
        print(f"{name + ('@' + N if N else ''):>10s}  {value:.4f}")
    return 0


def cmd_check(only, inject_fault: bool, out: str | None) -> int:
    results = run_checks(only, inject_fault=inject_fault)
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['name']:<26s} {r['detail']}  ({r['seconds']:.1f}s)")
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "checks.json").write_text(json.dumps(results, indent=1) + "\n", encoding="utf-8")
    failed = [r["name"] for r in results if not r["passed"]]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def cmd_bench(cfg: ExperimentConfig, ns, ts, settings: bench_mod.BenchSettings) -> int:
    data = _load_prepared(cfg) if cfg.data else synthetic_log(seed=cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.resolved")
    grid, sweep, monotone = bench_mod.run_bench(data, settings, ns=ns, ts=ts)
    cols = ["mode", "n", "T", "batches_timed", "seconds_per_batch", "epoch_seconds"]
    for name, rows in (("bench.csv", grid), ("bench_T.csv", sweep)):
        with open(out / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    report = {
        "settings": dataclasses.asdict(settings),
        "complexity": bench_mod.COMPLEXITY,
        "diffusion_time_monotone_in_T": monotone,
        "grid": grid,
        "t_sweep": sweep,
    }
    (out / "bench.json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    for r in grid + sweep:
        print(f"{r['mode']:>13s} n={r['n']:<4d} T={r['T']:<4d} epoch≈{r['epoch_seconds']:.3f}s")
    if not monotone:
        print("diffusion epoch time is not monotone in T", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file (flags override it)")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = _parse_bool if isinstance(f.default, bool) else type(f.default)
        p.add_argument(flag, dest=f.name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genatt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("prepare", "train", "eval", "bench"):
        sp = sub.add_parser(name)
        _add_config_flags(sp)
        if name == "eval":
            sp.add_argument("--baselines", action="store_true", help="also score popularity and random baselines")
        if name == "bench":
            sp.add_argument("--ns", type=lambda s: [int(x) for x in s.split(",")], default=list(bench_mod.NS))
            sp.add_argument("--ts", type=lambda s: [int(x) for x in s.split(",")], default=list(bench_mod.TS))
            sp.add_argument("--bench-batches", type=int, default=2)
            sp.add_argument("--bench-batch-size", type=int, default=8)
            sp.add_argument("--bench-d", type=int, default=16)
            sp.add_argument("--repeats", type=int, default=3)
    cp = sub.add_parser("check")
    cp.add_argument("--only", action="append", choices=sorted(CHECKS), help="run only the named check (repeatable)")
    cp.add_argument("--inject-fault", action="store_true", help="corrupt model gradients to exercise the harness")
    cp.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "check":
            return cmd_check(args.only, args.inject_fault, args.out)
        cfg = resolve_config(args)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, baselines=args.baselines)
        settings = bench_mod.BenchSettings(
            d=args.bench_d, batch_size=args.bench_batch_size, batches=args.bench_batches,
            repeats=args.repeats, seed=cfg.seed,
        )
        # the bench keeps its own small stack unless L or H is given explicitly
        if args.L is not None:
            settings.L = args.L
        if args.H is not None:
            settings.H = args.H
        return cmd_bench(cfg, args.ns, args.ts, settings)
    except (UsageError, ConfigError, SchemaError) as exc:
        print(f"genatt: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, DataError, OSError) as exc:
        print(f"genatt: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("unhandled", exc_info=True)
        print(f"genatt: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
