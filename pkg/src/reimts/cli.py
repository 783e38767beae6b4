"""Command-line front door: generate, train, eval, ablate and sweep.

Every training command writes a line-delimited JSON results file with one
``run`` record per seed and a closing ``summary`` record.  The summary embeds
the flags, config and format version needed to rerun the command.  Keys named
in ``TIMING_KEYS`` hold wall-clock measurements; everything else in a results
file is deterministic when ``REIMTS_DETERMINISTIC=1``.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from reimts import __version__
from reimts.backbones import BackboneSpec
from reimts.data import DataError, SyntheticSpec, generate, load_dataset, prepare, preset, write_dataset
from reimts.model import Ablation, DecodeMode, ReimtsConfig
from reimts.training import TrainConfig, TrainingError, evaluate, fit, load_checkpoint, save_checkpoint
from reimts.types import RepresentationKind, ScaleStack

log = logging.getLogger("reimts")

RESULTS_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
TIMING_KEYS = frozenset({"seconds", "seconds_per_iter", "elapsed_seconds", "created_at"})


class UsageError(Exception):
    pass


# -- flag parsing ---------------------------------------------------------------


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"2024..2028"`` (inclusive) or ``"1,2,5"``, or a mix of both."""
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if ".." in part:
                lo, hi = (int(x) for x in part.split(".."))
                if hi < lo:
                    raise UsageError(f"empty seed range {part!r}")
                seeds.extend(range(lo, hi + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise UsageError(f"cannot parse seeds {text!r}") from None
    if not seeds:
        raise UsageError("no seeds given")
    if len(set(seeds)) != len(seeds):
        raise UsageError(f"repeated seeds in {text!r}")
    return tuple(seeds)


def parse_floats(text: str, what: str) -> tuple[float, ...]:
    try:
        out = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"cannot parse {what} {text!r}") from None
    if not out:
        raise UsageError(f"no {what} given")
    return out


def parse_ints(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"cannot parse {what} {text!r}") from None


def parse_stack(text: str) -> ScaleStack:
    try:
        return ScaleStack(parse_floats(text, "levels"))
    except ValueError as exc:
        raise UsageError(f"--levels: {exc}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--levels", help="comma-separated time periods, largest first (default: lookback span and half of it)")
    p.add_argument("--backbone", default="temporal", choices=[k.value for k in RepresentationKind])
    p.add_argument("--decode-mode", default="concat", choices=[m.value for m in DecodeMode])
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--num-layers", type=int, default=1)
    p.add_argument("--scalar-alpha", action="store_true", help="one fusion score per position instead of per channel")
    p.add_argument("--num-queries", type=int, default=3, help="forecast timestamps per sample")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seeds", default="2024..2028")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-schedule", default="none", choices=["none", "halve"])
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-epochs", type=int, default=300)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--gradient-clip", type=float)
    p.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (forced to 1 when deterministic)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file of flag defaults; explicit flags win")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reimts", description="Recursive multi-scale forecasting for irregular time series.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic corpus and manifest")
    g.add_argument("--preset", default="multiscale", help="base settings to start from")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--split-seed", type=int, default=0)
    for f in fields(SyntheticSpec):
        if f.name in ("seed",):
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name in ("periods", "amplitudes"):
            g.add_argument(flag, help="two comma-separated numbers")
        else:
            g.add_argument(flag, type=type(f.default))

    t = sub.add_parser("train", help="train over several seeds and report mean +- std")
    _model_flags(t)
    t.add_argument("--ablation", default="full", choices=[a.value for a in Ablation])
    _train_flags(t)

    e = sub.add_parser("eval", help="evaluate saved checkpoints")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", nargs="+", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--num-queries", type=int, default=3)
    e.add_argument("--out", help="results file to write (default: stdout only)")

    a = sub.add_parser("ablate", help="train every ablation variant and compare")
    _model_flags(a)
    a.add_argument("--ablation", default=",".join(x.value for x in Ablation), help="comma-separated variants")
    _train_flags(a)

    s = sub.add_parser("sweep", help="sweep level counts and second-level periods")
    _model_flags(s)
    s.add_argument("--ablation", default="full", choices=[a.value for a in Ablation])
    s.add_argument("--level-counts", default="2,3,4")
    s.add_argument("--second-periods", help="comma-separated; default: half, third, quarter and sixth of the lookback")
    _train_flags(s)
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            defaults = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"--config: {exc}") from None
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(defaults) - known
        if unknown:
            raise UsageError(f"--config: unknown keys {sorted(unknown)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    args.argv = argv
    return args


# -- shared helpers ---------------------------------------------------------------


def deterministic() -> bool:
    return os.environ.get("REIMTS_DETERMINISTIC", "") not in ("", "0")


def configure_runtime() -> None:
    if deterministic():
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def write_jsonl(path: Path, records: list[dict]) -> None:
    atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def strip_timing(obj):
    """Copy of a results record with wall-clock fields removed."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def train_config(args) -> TrainConfig:
    try:
        return TrainConfig(
            learning_rate=args.lr, max_epochs=args.max_epochs, patience=args.patience,
            batch_size=args.batch_size, lr_schedule=args.lr_schedule,
            gradient_clip=args.gradient_clip, seeds=parse_seeds(args.seeds),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def model_config(args, manifest, stack: ScaleStack, ablation: str) -> ReimtsConfig:
    if not math.isclose(stack.total_span, manifest.total_span):
        raise UsageError(f"--levels must start at the lookback span {manifest.total_span:g}, got {stack.total_span:g}")
    try:
        spec = BackboneSpec(args.backbone, manifest.num_variables, args.hidden_dim, args.num_layers, stack.levels, stack.total_span)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return ReimtsConfig(stack, spec, args.decode_mode, ablation, not args.scalar_alpha)


def default_stack(manifest) -> ScaleStack:
    return ScaleStack((manifest.total_span, manifest.total_span / 2))


def summarize(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def _flags(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("argv", "verbose")}


# -- running experiments ----------------------------------------------------------


_DATA_CACHE: dict = {}


def _prepared(data_path: str, stack: ScaleStack, mode, num_queries: int):
    if data_path not in _DATA_CACHE:
        _DATA_CACHE.clear()
        _DATA_CACHE[data_path] = {"raw": load_dataset(data_path)}
    entry = _DATA_CACHE[data_path]
    key = (stack.periods, mode, num_queries)
    if key not in entry:
        manifest, samples = entry["raw"]
        entry[key] = prepare(samples, manifest, stack, mode, num_queries)
    return entry[key]


def run_one(job: dict) -> dict:
    """Train and evaluate one (config, seed) pair; returns a ``run`` record."""
    configure_runtime()
    config = ReimtsConfig.from_dict(job["config"])
    train = TrainConfig(**job["train"])
    dtype = getattr(torch, job["dtype"])
    data = _prepared(job["data"], config.stack, config.split_mode, job["num_queries"])
    start = time.perf_counter()
    result = fit(config, data, train, job["seed"], dtype)
    elapsed = time.perf_counter() - start
    val = evaluate(result.model, data["val"], dtype=dtype)
    test = evaluate(result.model, data["test"], dtype=dtype)
    if job.get("checkpoint"):
        save_checkpoint(job["checkpoint"], result.model, train, {"seed": job["seed"], "data": job["data"]})
    iters = [h["seconds_per_iter"] for h in result.history]
    return {
        "record": "run",
        "format_version": RESULTS_VERSION,
        "tag": job.get("tag", ""),
        "seed": job["seed"],
        "config": job["config"],
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "val": val,
        "test": test,
        "seconds_per_iter": float(np.mean(iters)),
        "elapsed_seconds": elapsed,
        "checkpoint": job.get("checkpoint"),
        "history": result.history,
    }


def run_jobs(jobs: list[dict], workers: int) -> list[dict]:
    if deterministic() or workers <= 1 or len(jobs) == 1:
        out = []
        for i, job in enumerate(jobs, start=1):
            log.info("run %d/%d: %s seed %d", i, len(jobs), job.get("tag", ""), job["seed"])
            out.append(run_one(job))
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, jobs))


def make_jobs(args, config: ReimtsConfig, train: TrainConfig, out: Path, tag: str, checkpoints: bool) -> list[dict]:
    train_dict = asdict(train)
    jobs = []
    for seed in train.seeds:
        name = f"{tag}-seed{seed}.pt" if tag else f"seed{seed}.pt"
        jobs.append(
            dict(
                config=config.to_dict(), train=train_dict, seed=seed, dtype=args.dtype,
                data=str(Path(args.data).resolve()), num_queries=args.num_queries, tag=tag,
                checkpoint=str(out / "checkpoints" / name) if checkpoints else None,
            )
        )
    return jobs


def summary_record(args, runs: list[dict], train: TrainConfig, tag: str = "", config: Optional[dict] = None) -> dict:
    rec = {
        "record": "summary",
        "format_version": RESULTS_VERSION,
        "reimts_version": __version__,
        "command": args.command,
        "argv": args.argv,
        "flags": _flags(args),
        "tag": tag,
        "config": config if config is not None else runs[0]["config"],
        "train_config": asdict(train),
        "lr_schedule": train.lr_schedule,
        "optimizer": "adam",
        "deterministic": deterministic(),
        "seeds": [r["seed"] for r in runs],
        "seconds_per_iter": float(np.mean([r["seconds_per_iter"] for r in runs])),
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    for split in ("val", "test"):
        for metric in ("mse", "mae"):
            mean, std = summarize([r[split][metric] for r in runs])
            rec[f"{split}_{metric}_mean"] = mean
            rec[f"{split}_{metric}_std"] = std
            rec[f"{split}_{metric}_mean_e-1"] = mean * 10
            rec[f"{split}_{metric}_std_e-1"] = std * 10
    return rec


def fmt(mean: float, std: float) -> str:
    """``mean ± std`` in units of 1e-1, as the comparison tables print them."""
    return f"{mean * 10:.3f} ± {std * 10:.3f}"


# -- subcommands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    overrides = {}
    for f in fields(SyntheticSpec):
        value = getattr(args, f.name, None)
        if f.name == "seed" or value is None:
            continue
        if f.name in ("periods", "amplitudes"):
            value = parse_floats(value, f.name)
            if len(value) != 2:
                raise UsageError(f"--{f.name} needs exactly two numbers")
        overrides[f.name] = value
    try:
        spec = preset(args.preset, seed=args.seed, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    corpus = generate(spec)
    manifest = write_dataset(corpus, args.out, args.split_seed)
    counts = [len(s) for s in corpus.samples]
    info = {
        "manifest": str(manifest),
        "num_samples": len(corpus),
        "num_variables": corpus.num_variables,
        "mean_observations": float(np.mean(counts)),
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()},
    }
    atomic_write(Path(args.out) / "spec.json", json.dumps(info["spec"], indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: v for k, v in info.items() if k != "spec"}))
    return EXIT_OK


def _load_manifest(args):
    return load_dataset(args.data)[0]


def cmd_train(args) -> int:
    manifest = _load_manifest(args)
    stack = parse_stack(args.levels) if args.levels else default_stack(manifest)
    config = model_config(args, manifest, stack, args.ablation)
    train = train_config(args)
    out = Path(args.out)
    runs = run_jobs(make_jobs(args, config, train, out, "", True), args.jobs)
    summary = summary_record(args, runs, train)
    write_jsonl(out / "results.jsonl", runs + [summary])
    print(f"test MSE {fmt(summary['test_mse_mean'], summary['test_mse_std'])}  "
          f"MAE {fmt(summary['test_mae_mean'], summary['test_mae_std'])}  (x1e-1, {len(runs)} seeds)")
    return EXIT_OK


def cmd_eval(args) -> int:
    records = []
    for path in args.checkpoint:
        if not Path(path).is_file():
            raise DataError(f"checkpoint {path} not found")
        model, payload = load_checkpoint(path)
        config = model.config
        manifest, samples = load_dataset(args.data)
        if not math.isclose(config.stack.total_span, manifest.total_span):
            raise UsageError(f"{path}: trained for lookback {config.stack.total_span:g}, data has {manifest.total_span:g}")
        split = prepare(samples, manifest, config.stack, config.split_mode, args.num_queries)[args.split]
        dtype = next(model.parameters()).dtype
        metrics = evaluate(model, split, dtype=dtype)
        rec = {"record": "eval", "format_version": RESULTS_VERSION, "checkpoint": str(path), "split": args.split,
               "config": payload["config"], **metrics}
        records.append(rec)
        print(json.dumps(rec, sort_keys=True))
    if args.out:
        write_jsonl(Path(args.out), records)
    return EXIT_OK


def cmd_ablate(args) -> int:
    manifest = _load_manifest(args)
    stack = parse_stack(args.levels) if args.levels else default_stack(manifest)
    try:
        variants = [Ablation(x.strip()) for x in args.ablation.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"--ablation: {exc}") from None
    train = train_config(args)
    out = Path(args.out)
    records, rows = [], []
    for variant in variants:
        config = model_config(args, manifest, stack, variant.value)
        runs = run_jobs(make_jobs(args, config, train, out, variant.value, False), args.jobs)
        summary = summary_record(args, runs, train, variant.value)
        records += runs + [summary]
        rows.append((variant.value, summary))
    write_jsonl(out / "results.jsonl", records)
    lines = ["| Variant | MSE (x1e-1) | MAE (x1e-1) | s/iter |", "|---|---|---|---|"]
    best = min(rows, key=lambda r: r[1]["test_mse_mean"])[0]
    for name, s in rows:
        mark = " *" if name == best else ""
        lines.append(f"| {name}{mark} | {fmt(s['test_mse_mean'], s['test_mse_std'])} | "
                     f"{fmt(s['test_mae_mean'], s['test_mae_std'])} | {s['seconds_per_iter']:.4f} |")
    table = "\n".join(lines) + "\n"
    atomic_write(out / "ablation.md", table)
    print(table, end="")
    return EXIT_OK


def sweep_stack(top: float, second: float, count: int) -> ScaleStack:
    """``[top, second, second/2, ...]`` with ``count`` periods."""
    periods = [top] + [second / 2**k for k in range(count - 1)]
    try:
        return ScaleStack(tuple(periods))
    except ValueError as exc:
        raise UsageError(f"cannot build {count} levels below {second:g}: {exc}") from None


def cmd_sweep(args) -> int:
    manifest = _load_manifest(args)
    top = manifest.total_span
    counts = parse_ints(args.level_counts, "level counts")
    if not counts or any(c < 2 for c in counts):
        raise UsageError("--level-counts needs values of at least 2")
    seconds = parse_floats(args.second_periods, "second periods") if args.second_periods else tuple(top / d for d in (2, 3, 4, 6))
    train = train_config(args)
    out = Path(args.out)
    cells: dict[tuple[int, float], dict] = {}
    records = []
    for n in counts:
        for p in seconds:
            stack = sweep_stack(top, p, n)
            config = model_config(args, manifest, stack, args.ablation)
            tag = f"N{n}-T{p:g}"
            runs = run_jobs(make_jobs(args, config, train, out, tag, False), args.jobs)
            summary = summary_record(args, runs, train, tag)
            summary.update(level_count=n, second_period=p)
            records += runs + [summary]
            cells[(n, p)] = summary
    best = min(cells, key=lambda c: cells[c]["test_mse_mean"])
    best_period = {n: min(seconds, key=lambda p: cells[(n, p)]["test_mse_mean"]) for n in counts}
    records.append({
        "record": "sweep", "format_version": RESULTS_VERSION, "best_level_count": best[0],
        "best_second_period": best[1], "best_period_per_level_count": {str(n): p for n, p in best_period.items()},
        "half_span_best": {str(n): math.isclose(p, top / 2) for n, p in best_period.items()},
    })
    write_jsonl(out / "results.jsonl", records)

    name = manifest.name
    head = "| Scale level | " + " | ".join(f"{name} T2={p:g}" for p in seconds) + " | s/iter |"
    lines = [head, "|---" * (len(seconds) + 2) + "|"]
    for n in counts:
        row = []
        for p in seconds:
            s = cells[(n, p)]
            text = fmt(s["test_mse_mean"], s["test_mse_std"])
            row.append(f"**{text}**" if (n, p) == best else text)
        sec = np.mean([cells[(n, p)]["seconds_per_iter"] for p in seconds])
        lines.append(f"| {n} | " + " | ".join(row) + f" | {sec:.4f} |")
    lines.append("")
    lines += [f"best second-level period for {n} levels: {best_period[n]:g}" for n in counts]
    report = "\n".join(lines) + "\n"
    atomic_write(out / "sweep.md", report)

    series = ["level_count,second_period,mse_mean,mse_std,mae_mean,mae_std,seconds_per_iter"]
    for (n, p), s in cells.items():
        series.append(f"{n},{p!r},{s['test_mse_mean']!r},{s['test_mse_std']!r},"
                      f"{s['test_mae_mean']!r},{s['test_mae_std']!r},{s['seconds_per_iter']!r}")
    atomic_write(out / "series.csv", "\n".join(series) + "\n")
    for n in counts:
        rows = ["second_period,mse_mean,mse_std"] + [
            f"{p!r},{cells[(n, p)]['test_mse_mean']!r},{cells[(n, p)]['test_mse_std']!r}" for p in seconds
        ]
        atomic_write(out / f"series_levels{n}.csv", "\n".join(rows) + "\n")
    print(report, end="")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "sweep": cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"reimts: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    configure_runtime()
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"reimts: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"reimts: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, RuntimeError, ValueError, OSError) as exc:
        print(f"reimts: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
