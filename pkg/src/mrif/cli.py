"""
Command-line entry point.

    mrif prepare  --data reviews.json.gz
    mrif train    --data reviews.json.gz --aggregator attn --layers 2 --window 3
    mrif evaluate --data reviews.json.gz --checkpoint runs/<name>/model.ckpt
    mrif ablate   --data synthetic --seed 0 1 2 3 4

Settings come from built-in defaults, then a ``key=value`` file given with
``--config``, then command-line flags. ``--data synthetic`` uses the bundled
generator instead of a file. Output goes under ``--out``, or ``$MRIF_OUT``,
or ``./mrif-out``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on bad usage or input.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import traceback
from dataclasses import fields
from pathlib import Path
from typing import Optional

from . import __version__
from .data import SequenceDataset, prepare_split, read_split, write_split
from .errors import (
    CheckpointError,
    ContractError,
    DataFormatError,
    EmptyCoreError,
    EmptyLogError,
    InsufficientNegativesError,
)
from .evaluation import METRIC_ORDER, PopularityScorer, config_hash, evaluate, format_table
from .model import MrifModel, ModelConfig, load_checkpoint, save_checkpoint
from .synthetic import SyntheticSpec, synthetic_dataset
from .train import MetricsLogger, TrainConfig, fit

OUT_ENV = "MRIF_OUT"
SYNTHETIC = "synthetic"

# data-side settings that belong to neither config dataclass
DATA_DEFAULTS = {"k": 10, "negatives": 100, "split_seed": 0, "format": None}

# method name -> (aggregator, aggregation layers or None for the configured count)
ABLATIONS = {
    "POP": None,
    "L=0": ("attn", 0),
    "MRIF-avg": ("mean", None),
    "MRIF-max": ("max", None),
    "MRIF-attn": ("attn", None),
}


class UsageError(Exception):
    """Bad flags, unreadable config or missing input: exit code 2."""


# -- settings ----------------------------------------------------------------


def _field_types(cls) -> dict:
    return {f.name: f.type for f in fields(cls)}


def _defaults() -> dict:
    model = ModelConfig(vocab_size=2)
    settings = {k: v for k, v in model.to_dict().items() if k != "vocab_size"}
    settings.update(TrainConfig().to_dict())
    settings.update(DATA_DEFAULTS)
    settings.update({f"synthetic.{k}": v for k, v in SyntheticSpec().to_dict().items()})
    return settings


def _coerce(key: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return None if raw.strip().lower() in ("", "none") else raw.strip()


def read_config_file(path, defaults: dict) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in defaults:
            raise UsageError(f"{path}:{lineno}: unknown setting {key!r}")
        out[key] = _coerce(key, value, defaults[key])
    return out


def resolve_settings(args: argparse.Namespace) -> dict:
    settings = _defaults()
    if args.config:
        settings.update(read_config_file(args.config, settings))
    overrides = {
        "aggregator": args.aggregator,
        "num_agg_layers": args.layers,
        "epochs_pretrain": args.epochs_pretrain,
        "epochs_train": args.epochs_train,
    }
    if args.window is not None:
        if args.window < 1 or args.window % 2 == 0:
            raise UsageError(f"--window must be an odd width >= 1, got {args.window}")
        overrides["half_window"] = (args.window - 1) // 2
    if args.freeze_extractor:
        overrides["freeze_extractor"] = True
    settings.update({k: v for k, v in overrides.items() if v is not None})
    seeds = args.seed if args.seed else [settings["seed"]]
    settings["seed"] = seeds[0]
    settings["seeds"] = list(seeds)
    return settings


def model_config(settings: dict, vocab_size: int, **override) -> ModelConfig:
    keys = set(_field_types(ModelConfig)) - {"vocab_size"}
    values = {k: settings[k] for k in keys}
    values.update(override)
    return ModelConfig(vocab_size=vocab_size, **values)


def train_config(settings: dict, **override) -> TrainConfig:
    values = {k: settings[k] for k in _field_types(TrainConfig)}
    values.update(override)
    return TrainConfig(**values)


def print_settings(settings: dict, stream=None) -> None:
    stream = stream or sys.stdout
    print(f"mrif {__version__} settings:", file=stream)
    width = max(len(k) for k in settings)
    for key in sorted(settings):
        print(f"  {key.ljust(width)} = {settings[key]}", file=stream)
    stream.flush()


# -- data --------------------------------------------------------------------


def output_root(args) -> Path:
    root = Path(args.out or os.environ.get(OUT_ENV) or "mrif-out")
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {root}: {exc}") from None
    if not os.access(root, os.W_OK):
        raise UsageError(f"output directory is not writable: {root}")
    return root


def load_dataset(args, settings: dict, out: Path):
    """Return ``(dataset, description, split_path, reused)`` for ``--data``."""
    if not args.data:
        raise UsageError("--data is required")
    split_dir = out / "splits"
    if args.data == SYNTHETIC:
        spec = SyntheticSpec(**{k.split(".", 1)[1]: v for k, v in settings.items() if k.startswith("synthetic.")})
        seed, neg = settings["split_seed"], settings["negatives"]
        path = split_dir / f"synthetic-{config_hash(spec.to_dict())}-s{seed}-neg{neg}.bin"
        if path.exists():
            return read_split(path), SYNTHETIC, path, True
        dataset = synthetic_dataset(spec, seed=seed, num_negatives=neg)
        split_dir.mkdir(parents=True, exist_ok=True)
        write_split(dataset, path)
        return dataset, SYNTHETIC, path, False
    source = Path(args.data)
    if not source.exists():
        raise UsageError(f"data path does not exist: {source}")
    if source.suffix == ".bin":
        return read_split(source), str(source), source, True
    path, dataset, reused = prepare_split(
        source,
        split_dir,
        k=settings["k"],
        seed=settings["split_seed"],
        num_negatives=settings["negatives"],
        fmt=settings["format"],
    )
    return dataset, str(source), path, reused


def stats_table(stats: dict, name: str) -> str:
    lines = ["Dataset".ljust(16) + "#Users".rjust(10) + "#Items".rjust(10) + "#Actions".rjust(12)]
    lines.append(name[:16].ljust(16) + f"{stats['users']:>10,}{stats['items']:>10,}{stats['actions']:>12,}")
    return "\n".join(lines)


# -- runs --------------------------------------------------------------------


def run_name(method: str, mcfg: ModelConfig, tcfg: TrainConfig) -> str:
    safe = method.replace("=", "").replace("/", "-")
    return f"{safe}-s{tcfg.seed}-{config_hash(mcfg, tcfg)[:10]}"


def train_model(dataset: SequenceDataset, mcfg: ModelConfig, tcfg: TrainConfig, run_dir: Path, quiet: bool = False):
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "metrics.jsonl"
    if metrics_path.exists():
        metrics_path.unlink()
    (run_dir / "config.json").write_text(json.dumps({"model": mcfg.to_dict(), "train": tcfg.to_dict()}, indent=2))
    model = MrifModel(mcfg, seed=tcfg.seed, dtype=tcfg.dtype)
    fit(model, dataset, tcfg, MetricsLogger(metrics_path, quiet=quiet))
    save_checkpoint(model, run_dir / "model.ckpt")
    return model


def mean_metrics(reports: list) -> dict:
    return {k: math.fsum(r.metrics[k] for r in reports) / len(reports) for k in METRIC_ORDER}


# -- subcommands -------------------------------------------------------------


def cmd_prepare(args, settings, out) -> int:
    dataset, name, path, reused = load_dataset(args, settings, out)
    print(f"split file: {path} ({'reused' if reused else 'written'})")
    print(stats_table(dataset.stats(), Path(name).name))
    return 0


def cmd_train(args, settings, out) -> int:
    dataset, name, split_path, _ = load_dataset(args, settings, out)
    mcfg = model_config(settings, dataset.vocab_size)
    tcfg = train_config(settings)
    method = "L=0" if mcfg.num_agg_layers == 0 else f"MRIF-{mcfg.aggregator}"
    run_dir = out / "runs" / run_name(method, mcfg, tcfg)
    print(f"training {method} on {name} ({dataset.num_users} users) -> {run_dir}")
    model = train_model(dataset, mcfg, tcfg, run_dir, quiet=args.quiet)
    report = evaluate(model, dataset, meta=_meta(method, mcfg, tcfg, split_path))
    report.to_json(run_dir / "report.json")
    print(report.to_table(method))
    print(f"checkpoint: {run_dir / 'model.ckpt'}")
    return 0


def cmd_evaluate(args, settings, out) -> int:
    dataset, name, split_path, _ = load_dataset(args, settings, out)
    if args.checkpoint is None:
        raise UsageError("evaluate needs --checkpoint (a model file, or POP)")
    if args.checkpoint == "POP":
        report = evaluate(PopularityScorer(dataset), dataset, meta={"method": "POP", "split": split_path.name})
        method = "POP"
    else:
        ckpt = Path(args.checkpoint)
        if not ckpt.is_file():
            raise UsageError(f"checkpoint not found: {ckpt}")
        model = load_checkpoint(ckpt)
        if model.config.vocab_size != dataset.vocab_size:
            raise UsageError(
                f"checkpoint vocabulary ({model.config.vocab_size}) does not match the data ({dataset.vocab_size})"
            )
        method = "L=0" if model.config.num_agg_layers == 0 else f"MRIF-{model.config.aggregator}"
        report = evaluate(model, dataset, meta={"method": method, "checkpoint": str(ckpt), "split": split_path.name})
    target = Path(args.report) if args.report else out / "reports" / f"{method.replace('=', '')}-eval.json"
    target.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(target)
    print(report.to_table(method))
    print(f"report: {target}")
    return 0


def _meta(method, mcfg, tcfg, split_path) -> dict:
    meta = {"method": method, "seed": tcfg.seed, "split": Path(split_path).name}
    if mcfg is not None:
        meta.update({"config_hash": config_hash(mcfg, tcfg), "model": mcfg.to_dict(), "train": tcfg.to_dict()})
    return meta


def cmd_ablate(args, settings, out) -> int:
    dataset, name, split_path, _ = load_dataset(args, settings, out)
    seeds = settings["seeds"]
    base = model_config(settings, dataset.vocab_size)
    ablate_dir = out / "ablate" / f"{Path(name).stem}-{config_hash({k: v for k, v in settings.items() if k not in ('seeds', 'seed')})[:10]}"
    ablate_dir.mkdir(parents=True, exist_ok=True)
    reports: dict = {m: [] for m in ABLATIONS}
    files: dict = {m: [] for m in ABLATIONS}
    methods = [m for m in ABLATIONS if not args.methods or m in args.methods]
    print(f"ablation on {name}: methods {methods}, seeds {seeds} -> {ablate_dir}")
    failure = None
    try:
        for method in methods:
            spec = ABLATIONS[method]
            for seed in seeds:
                tcfg = train_config(settings, seed=seed)
                if spec is None:
                    mcfg = None
                    scorer = PopularityScorer(dataset)
                    stem = f"POP-s{seed}"
                else:
                    agg, layers = spec
                    mcfg = ModelConfig.from_dict(
                        {**base.to_dict(), "aggregator": agg, "num_agg_layers": base.num_agg_layers if layers is None else layers}
                    )
                    stem = run_name(method, mcfg, tcfg)
                    print(f"-- {method} seed {seed}", flush=True)
                    scorer = train_model(dataset, mcfg, tcfg, ablate_dir / "runs" / stem, quiet=args.quiet)
                report = evaluate(scorer, dataset, meta=_meta(method, mcfg, tcfg, split_path))
                path = ablate_dir / f"{stem}.json"
                report.to_json(path)
                reports[method].append(report)
                files[method].append(path.name)
                print(f"   {method} seed {seed}: " + "  ".join(f"{k}={report.metrics[k]:.4f}" for k in METRIC_ORDER))
    except Exception as exc:  # keep finished runs on disk, then re-raise
        failure = exc
    done = {m: mean_metrics(r) for m, r in reports.items() if r}
    summary = {
        "seeds": seeds,
        "complete": failure is None,
        "means": done,
        "reports": {m: f for m, f in files.items() if f},
    }
    if failure is not None:
        summary["error"] = f"{type(failure).__name__}: {failure}"
    (ablate_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    if done:
        table = format_table(done)
        (ablate_dir / "table.txt").write_text(table + "\n")
        print(f"\nmean over {len(seeds)} seed(s):")
        print(table)
    print(f"summary: {ablate_dir / 'summary.json'}")
    if failure is not None:
        raise failure
    return 0


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help=f"interaction file (.tsv/.jsonl, optionally .gz), a prepared .bin split, or '{SYNTHETIC}'")
    common.add_argument("--out", help=f"output root (default: ${OUT_ENV} or ./mrif-out)")
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--seed", type=int, nargs="+", help="random seed(s); ablate runs every seed")
    common.add_argument("--aggregator", choices=["mean", "max", "attn"])
    common.add_argument("--layers", type=int, help="number of aggregation layers")
    common.add_argument("--window", type=int, help="aggregation window width (odd)")
    common.add_argument("--epochs-pretrain", type=int)
    common.add_argument("--epochs-train", type=int)
    common.add_argument("--freeze-extractor", action="store_true", help="keep embeddings and transformer fixed in phase 2")
    common.add_argument("--quiet", action="store_true", help="suppress per-epoch logging")

    parser = argparse.ArgumentParser(prog="mrif", description="Multi-resolution interest fusion recommender.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="ingest, k-core filter and split a dataset")
    sub.add_parser("train", parents=[common], help="train one model and evaluate it")
    ev = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint (or POP)")
    ev.add_argument("--checkpoint", help="model checkpoint, or 'POP' for the popularity baseline")
    ev.add_argument("--report", help="where to write the report JSON")
    ab = sub.add_parser("ablate", parents=[common], help="POP, L=0 and the three MRIF variants over seeds")
    ab.add_argument("--methods", nargs="+", choices=list(ABLATIONS), help="subset of methods to run")
    return parser


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate}
INPUT_ERRORS = (
    UsageError,
    DataFormatError,
    EmptyLogError,
    EmptyCoreError,
    InsufficientNegativesError,
    CheckpointError,
    ContractError,
)


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        settings = resolve_settings(args)
        print_settings(settings)
        out = output_root(args)
        return COMMANDS[args.command](args, settings, out)
    except INPUT_ERRORS as exc:
        print(f"mrif: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("mrif: interrupted", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"mrif: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        if os.environ.get("MRIF_DEBUG"):
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
