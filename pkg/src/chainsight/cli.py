"""Command-line entry point: ``chainsight <stage> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .errors import ChainsightError, InputError, StorageError
from .fixture import generate_fixture
from .modeling import KINDS

STAGES = ("ingest", "properties", "distributions", "dataset", "train", "evaluate", "export-plot", "run-all")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON pipeline config")
    p.add_argument("--store", help="store directory (overrides $CHAINSIGHT_STORE and config)")
    p.add_argument("--preset", type=int, choices=range(1, 9), metavar="1..8")
    p.add_argument("--wn", type=int)
    p.add_argument("--norm", choices=pipeline.NORMS)
    p.add_argument("--target")
    p.add_argument("--model", choices=KINDS)
    p.add_argument("--hidden", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--dataset", type=Path, help="dataset file (default: <store>/artifacts/dataset.bpd)")
    p.add_argument("--rpc", help="JSON-RPC endpoint instead of block/transaction files")
    p.add_argument("--rpc-range", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--fit-train-only", action="store_true", default=None)
    p.add_argument("--skip-bad-records", action="store_true", default=None)
    p.add_argument("--forward-fill", action="store_true", default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="chainsight", description="blockchain + market data to ML datasets")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sp = sub.add_parser(name, parents=[common])
        if name == "export-plot":
            sp.add_argument("--property", help="only export frames for this distribution")
    fx = sub.add_parser("generate-fixture", help="write a synthetic chain, ticks and config")
    fx.add_argument("--out", type=Path, required=True)
    fx.add_argument("--seed", type=int, default=7)
    fx.add_argument("--n-blocks", type=int, default=1000)
    fx.add_argument("--n-accounts", type=int, default=200)
    return parser


def resolve_config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig.load(args.config) if args.config else pipeline.PipelineConfig()
    env_store = os.environ.get(pipeline.STORE_ENV)
    if env_store:
        cfg.store = env_store
    if args.store:
        cfg.store = args.store
    for flag, attr in (("preset", "preset"), ("wn", "wn"), ("norm", "norm"), ("target", "target"),
                       ("model", "model"), ("hidden", "hidden"), ("threads", "threads"), ("rpc", "rpc"),
                       ("fit_train_only", "fit_train_only"), ("skip_bad_records", "skip_bad_records"),
                       ("forward_fill", "forward_fill")):
        value = getattr(args, flag)
        if value is not None:
            setattr(cfg, attr, value)
    if args.rpc_range is not None:
        cfg.rpc_range = tuple(args.rpc_range)
    train_over = {k: v for k, v in (("epochs", args.epochs), ("learning_rate", args.lr),
                                    ("batch_size", args.batch_size), ("seed", args.seed)) if v is not None}
    if train_over:
        try:
            cfg.train = replace(cfg.train, **train_over)
        except ValueError as exc:
            raise pipeline.ConfigError("train", str(exc)) from None
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def run(args) -> object:
    if args.command == "generate-fixture":
        paths = generate_fixture(args.out, args.seed, args.n_blocks, args.n_accounts)
        return {k: str(v) for k, v in vars(paths).items()}
    cfg = resolve_config(args)
    if args.command == "ingest":
        return pipeline.stage_ingest(cfg)
    if args.command == "properties":
        return pipeline.stage_properties(cfg)
    if args.command == "distributions":
        return pipeline.stage_distributions(cfg)
    if args.command == "dataset":
        return str(pipeline.stage_dataset(cfg, args.dataset))
    if args.command == "train":
        return pipeline.stage_train(cfg, args.dataset)
    if args.command == "evaluate":
        return pipeline.stage_evaluate(cfg, args.dataset)
    if args.command == "export-plot":
        return pipeline.stage_export_plot(cfg, args.dataset, args.property)
    return pipeline.run_all(cfg)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (StorageError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except ChainsightError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
