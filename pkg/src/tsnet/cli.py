"""Command-line entry point: ``tsnet <command> [--config PATH] [--seed 0,1,2] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataParseError, SchemaError, TSNetError
from .experiments import ExperimentConfig, emit_outputs, run, write_predictions
from .training import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_PARTIAL = 0, 2, 3, 4, 5

COMMANDS = {
    "toy1d": ("toy1d", "toy1d", "train on the 1D toy and evaluate on its noise-free grid"),
    "toy2d": ("toy2d", "toy2d", "train on the 2D toy and evaluate on its noise-free grid"),
    "compare": ("compare", None, "multi-seed train/test comparison on a dataset"),
    "antinoise": ("antinoise", None, "MSE and RPI across gaussian noise rates"),
    "active": ("active", None, "uncertainty vs random active-learning loop"),
    "ablate": ("ablate", None, "all eight variants with In / Ext / All MSE"),
}


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=_seeds, help="comma-separated seeds, e.g. 0,1,2")
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", help="also save the representative model here")
    p = sub.add_parser("predict", help="predict with a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="headered CSV of feature columns")
    p.add_argument("--out", required=True, help="output directory for predictions.csv")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.add_argument("--seed", type=_seeds, help=argparse.SUPPRESS)
    return parser


def _experiment_config(args) -> ExperimentConfig:
    kind, source, _ = COMMANDS[args.command]
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
    d["kind"] = kind
    if source is not None:
        d["source"] = source
    if args.seed is not None:
        d["seeds"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    return ExperimentConfig.from_dict(d)


def _predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    with open(args.input, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    try:
        X = np.loadtxt(args.input, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise DataParseError(f"{args.input}: {exc}") from None
    if X.shape[1] != model.norm.x_mean.size:
        raise DataParseError(f"{args.input}: expected {model.norm.x_mean.size} feature columns, "
                             f"got {X.shape[1]}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    targets = [f"y{k}" for k in range(model.norm.y_mean.size)]
    write_predictions(out / "predictions.csv", model, X, header, targets)
    print(out / "predictions.csv")
    return EXIT_OK


def _summary(report) -> str:
    parts = []
    for key, agg in report.aggregate.items():
        if isinstance(agg, dict) and agg.get("mean") is not None:
            parts.append(f"{key}={agg['mean']:.4g}±{agg['std']:.2g}")
        elif isinstance(agg, dict):
            inner = agg.get("mse_all")
            if inner and inner.get("mean") is not None:
                parts.append(f"{key}: all={inner['mean']:.4g}")
    return "; ".join(parts)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "predict":
            return _predict(args)
        cfg = _experiment_config(args)
        report, extras = run(cfg)
        if cfg.out is not None:
            if extras:
                files = emit_outputs(report, cfg.out, **extras)
            else:
                files = emit_outputs(report, cfg.out)
            if args.checkpoint and extras:
                save_checkpoint(extras["model"], args.checkpoint)
            for f in files:
                print(f)
        else:
            print(json.dumps(report.to_dict(), indent=2))
        print(_summary(report), file=sys.stderr)
        failed = report.failed_seeds
        if not failed:
            return EXIT_OK
        for row in report.per_seed:
            if row["status"] != "ok":
                print(f"seed {row['seed']} {row['status']}: {row['error']}", file=sys.stderr)
        if len(failed) == len(report.seeds):
            kinds = {r.get("error_type") for r in report.per_seed}
            if kinds == {"DivergenceError"}:
                return EXIT_DIVERGED
            if kinds & {"DataParseError", "SchemaError"}:
                return EXIT_DATA
        return EXIT_PARTIAL
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataParseError, SchemaError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContractError, TSNetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
