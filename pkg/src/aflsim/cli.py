"""Command line entry points: `aflsim run` and `aflsim sweep`.

Both read a JSON config file, write a metrics CSV and a manifest into the
output directory, and exit 0 only if every run completed.  The default output
directory is ./results, overridable with --out or the AFLSIM_OUT environment
variable.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .aggregation import STRATEGY_KINDS
from .config import ConfigError, load_config
from .harness import (
    CSV_HEADER,
    SweepRunError,
    run_experiment,
    run_sweep,
    write_manifest,
    write_text,
)

ENV_OUT = "AFLSIM_OUT"


def parse_seed_list(text: str) -> list[int]:
    """Either a comma list ("1,2,5") or an inclusive range ("1..5")."""
    text = text.strip()
    if ".." in text:
        lo_text, _, hi_text = text.partition("..")
        try:
            lo, hi = int(lo_text), int(hi_text)
        except ValueError:
            raise ValueError(f"bad seed range {text!r}, expected like 1..5") from None
        if hi < lo:
            raise ValueError(f"seed range {text!r} is empty")
        return list(range(lo, hi + 1))
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ValueError(f"bad seed list {text!r}, expected like 1,2,3 or 1..5") from None
    if not seeds:
        raise ValueError("seed list is empty")
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"seed list {text!r} has duplicates")
    return seeds


def parse_strategy_list(text: str) -> list[str]:
    names = [part.strip() for part in text.split(",") if part.strip()]
    if not names:
        raise ValueError("strategy list is empty")
    for name in names:
        if name not in STRATEGY_KINDS:
            raise ValueError(
                f"unknown strategy {name!r}, expected one of {', '.join(STRATEGY_KINDS)}"
            )
    if len(set(names)) != len(names):
        raise ValueError(f"strategy list {text!r} has duplicates")
    return names


def _out_dir(args) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(os.environ.get(ENV_OUT, "results"))


def _load(args):
    config = load_config(args.config)
    if args.max_rounds is not None:
        config = replace(config, max_rounds=args.max_rounds)
    return config


def _cmd_run(args) -> int:
    try:
        config = _load(args)
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    out = _out_dir(args)
    try:
        exp = run_experiment(config)
    except Exception as e:
        print(f"error: run {args.config} failed: {e}", file=sys.stderr)
        return 1
    write_text(out / "metrics.csv", exp.csv_text)
    write_manifest(out / "manifest.json", exp.manifest)
    if not args.quiet:
        rounds = exp.manifest["rounds_completed"]
        print(
            f"{exp.config.strategy.kind}: {rounds} rounds, "
            f"final accuracy {exp.result.final_accuracy:.4f}, "
            f"loss {exp.result.final_loss:.4f}"
        )
        print(f"wrote {out / 'metrics.csv'} and {out / 'manifest.json'}")
    return 0


def _cmd_sweep(args) -> int:
    try:
        config = _load(args)
        strategies = parse_strategy_list(args.strategies)
        seeds = parse_seed_list(args.seeds)
    except (ConfigError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    out = _out_dir(args)
    csv_path = out / "metrics.csv"
    write_text(csv_path, ",".join(CSV_HEADER) + "\n")

    def flush(strategy, seed, piece, exp):
        with open(csv_path, "a") as fh:
            fh.write(piece)
        if not args.quiet:
            print(
                f"{strategy} seed {seed}: {exp.manifest['rounds_completed']} rounds, "
                f"final accuracy {exp.result.final_accuracy:.4f}"
            )

    try:
        sweep = run_sweep(
            config, strategies, seeds, target_fraction=args.target_fraction, flush=flush
        )
    except SweepRunError as e:
        print(f"error: {e}", file=sys.stderr)
        print(f"partial results in {csv_path}", file=sys.stderr)
        return 1
    write_manifest(out / "manifest.json", sweep.manifest)
    if not args.quiet:
        for strategy in strategies:
            reach = sweep.rounds_to_target[strategy]
            reach_text = str(reach) if reach is not None else "never"
            final = sweep.manifest["median_final_accuracy"][strategy]
            print(
                f"{strategy}: median final accuracy {final:.4f}, "
                f"reaches {sweep.target_accuracy:.4f} at round {reach_text}"
            )
        print(f"wrote {csv_path} and {out / 'manifest.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aflsim",
        description="Deterministic simulator for buffered asynchronous federated learning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one configured simulation")
    sweep_p = sub.add_parser("sweep", help="run a strategy x seed grid and compare curves")
    for p in (run_p, sweep_p):
        p.add_argument("config", help="path to a JSON run config")
        p.add_argument("--out", default=None, help=f"output directory (default $%s or ./results)" % ENV_OUT)
        p.add_argument("--max-rounds", type=int, default=None, help="override the config's round budget")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
    sweep_p.add_argument(
        "--strategies", required=True,
        help="comma-separated strategy kinds, e.g. fedbuff,contribution_aware",
    )
    sweep_p.add_argument(
        "--seeds", required=True, help="trial seeds: comma list (1,2,3) or range (1..5)"
    )
    sweep_p.add_argument(
        "--target-fraction", type=float, default=0.9,
        help="target accuracy as a fraction of the best median accuracy (default 0.9)",
    )
    run_p.set_defaults(func=_cmd_run)
    sweep_p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
