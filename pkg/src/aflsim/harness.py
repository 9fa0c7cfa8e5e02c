"""Experiment harness: config in, metrics CSV and manifest out.

A single experiment produces a CSV trace with one row per evaluation and a
JSON manifest describing the run.  A sweep repeats the experiment over a
strategy list and several trial seeds, concatenates the traces, and reports
median accuracy curves plus the first round each strategy reaches a target
accuracy.  Nothing here depends on wall-clock time, so rerunning the same
config yields byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import platform
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, Seeds, config_hash
from .data import Dataset, PartitionPlan, generate_synthetic, load_idx, partition
from .engine import MetricsRow, RunResult, run

CSV_HEADER = (
    "round", "sim_time", "strategy", "seed", "test_accuracy", "test_loss",
    "mean_tau", "max_tau", "mean_S", "mean_raw_weight", "flags",
)


def build_datasets(config: RunConfig) -> tuple[Dataset, Dataset]:
    """Materialize the train and test datasets a config describes.

    Synthetic data is generated in one piece and split per class, so the test
    set has the same class balance as the train set.
    """
    ds = config.dataset
    if ds.kind == "idx":
        train = load_idx(ds.images, ds.labels)
        test = load_idx(ds.test_images, ds.test_labels)
        if train.dim != test.dim:
            raise ValueError(
                f"train images are {train.dim}-dimensional but test images are {test.dim}"
            )
        return train, test

    full = generate_synthetic(ds.classes, ds.dim, ds.n_per_class, ds.spread, config.seeds.data)
    per_class_test = int(round(ds.test_fraction * ds.n_per_class))
    train_idx, test_idx = [], []
    for c in range(ds.classes):
        block = np.arange(c * ds.n_per_class, (c + 1) * ds.n_per_class)
        train_idx.append(block[: ds.n_per_class - per_class_test])
        test_idx.append(block[ds.n_per_class - per_class_test :])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    train = Dataset(full.features[train_idx], full.labels[train_idx], ds.classes)
    test = Dataset(full.features[test_idx], full.labels[test_idx], ds.classes)
    return train, test


def resolve_arch(config: RunConfig, train: Dataset) -> RunConfig:
    """Fill in the default architecture (one 64-unit hidden layer) if unset."""
    if config.arch is not None:
        if config.arch[0] != train.dim or config.arch[-1] != train.class_count:
            raise ValueError(
                f"arch {config.arch} does not match data: "
                f"{train.dim} features, {train.class_count} classes"
            )
        return config
    return replace(config, arch=[train.dim, 64, train.class_count])


def build_partition(config: RunConfig, train: Dataset) -> PartitionPlan:
    params = {}
    if config.partition.scheme == "label_shard":
        params["shards_per_client"] = config.partition.shards_per_client
    elif config.partition.scheme == "dirichlet":
        params["alpha"] = config.partition.alpha
    return partition(
        train, config.clients, config.partition.scheme, (config.seeds.data, 1), **params
    )


@dataclass
class ExperimentResult:
    config: RunConfig
    result: RunResult
    plan: PartitionPlan
    csv_text: str
    manifest: dict


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(rows: list[MetricsRow], strategy: str, seed: int, header: bool = True) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    if header:
        writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(
            [
                row.round,
                _fmt(row.sim_time),
                strategy,
                seed,
                _fmt(row.test_accuracy),
                _fmt(row.test_loss),
                _fmt(row.mean_tau),
                _fmt(row.max_tau),
                _fmt(row.mean_s),
                _fmt(row.mean_raw_weight),
                row.flags,
            ]
        )
    return out.getvalue()


def _versions() -> dict:
    return {
        "aflsim": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def execute_run(config: RunConfig) -> tuple[RunConfig, RunResult, PartitionPlan]:
    """Run one simulation end to end from a config."""
    train, test = build_datasets(config)
    config = resolve_arch(config, train)
    plan = build_partition(config, train)
    return config, run(config, train, plan, test), plan


def run_experiment(config: RunConfig, seed_label: int | None = None) -> ExperimentResult:
    """One config, one run, one CSV, one manifest.

    ``seed_label`` fills the CSV seed column; it defaults to the model seed.
    In a sweep it is the trial seed instead.
    """
    resolved, result, plan = execute_run(config)
    label = config.seeds.model if seed_label is None else seed_label
    csv_text = rows_to_csv(result.rows, resolved.strategy.kind, label)
    flags = sorted({f for rec in result.round_records for f in rec.flags})
    manifest = {
        "config_hash": config_hash(resolved),
        "strategy": resolved.strategy.kind,
        "seed": label,
        "seeds": {
            "model": resolved.seeds.model,
            "data": resolved.seeds.data,
            "speed": resolved.seeds.speed,
            "sampling": resolved.seeds.sampling,
        },
        "rounds_completed": result.round_records[-1].round if result.round_records else 0,
        "final_accuracy": result.final_accuracy,
        "final_loss": result.final_loss,
        "partition_sizes": plan.sizes(),
        "flags": flags,
        "versions": _versions(),
    }
    return ExperimentResult(resolved, result, plan, csv_text, manifest)


def trial_seeds(trial: int) -> Seeds:
    """Derive the four run seeds from one trial seed, pairwise distinct."""
    if trial < 0:
        raise ValueError("trial seed must be non-negative")
    base = trial * 10
    return Seeds(model=base + 1, data=base + 2, speed=base + 3, sampling=base + 4)


def accuracy_by_round(rows: list[MetricsRow]) -> dict[int, float]:
    return {row.round: row.test_accuracy for row in rows}


def rounds_to_target(curve: list[tuple[int, float]], target: float) -> int | None:
    """First round whose accuracy reaches target, scanning in round order."""
    for rnd, acc in curve:
        if acc >= target:
            return rnd
    return None


@dataclass
class SweepResult:
    runs: list[ExperimentResult]
    csv_text: str
    manifest: dict
    median_curves: dict[str, list[tuple[int, float]]]
    target_accuracy: float
    rounds_to_target: dict[str, int | None]


class SweepRunError(RuntimeError):
    """One run of a sweep failed; carries which one."""

    def __init__(self, strategy: str, seed: int, cause: Exception):
        super().__init__(f"run strategy={strategy} seed={seed} failed: {cause}")
        self.strategy = strategy
        self.seed = seed


def run_sweep(
    base_config: RunConfig,
    strategies: list[str],
    seeds: list[int],
    target_fraction: float = 0.9,
    flush=None,
) -> SweepResult:
    """Run every (strategy, trial seed) pair and compare median accuracy curves.

    The trial seed replaces all four run seeds via trial_seeds(), so two
    strategies at the same trial share identical data, partition, speeds and
    batch draws: a paired comparison.  The target accuracy is target_fraction
    times the best median accuracy any strategy reaches within the round
    budget.

    ``flush``, if given, is called as flush(strategy, seed, csv_piece, exp)
    after each completed run, so partial results survive a later failure.
    Runs execute and serialize in (strategy, seed) order.
    """
    if not strategies:
        raise ValueError("strategies list is empty")
    if not seeds:
        raise ValueError("seeds list is empty")
    if not 0.0 < target_fraction <= 1.0:
        raise ValueError("target_fraction must lie in (0, 1]")

    runs = []
    pieces = [rows_to_csv([], "", 0)]  # header only
    by_strategy: dict[str, list[ExperimentResult]] = {s: [] for s in strategies}
    for strategy in strategies:
        for trial in seeds:
            try:
                cfg = replace(
                    base_config,
                    strategy=replace(base_config.strategy, kind=strategy),
                    seeds=trial_seeds(trial),
                )
                exp = run_experiment(cfg, seed_label=trial)
            except Exception as e:
                raise SweepRunError(strategy, trial, e) from e
            runs.append(exp)
            by_strategy[strategy].append(exp)
            piece = rows_to_csv(exp.result.rows, strategy, trial, header=False)
            pieces.append(piece)
            if flush is not None:
                flush(strategy, trial, piece, exp)

    median_curves: dict[str, list[tuple[int, float]]] = {}
    for strategy in strategies:
        group = by_strategy[strategy]
        per_run = [accuracy_by_round(exp.result.rows) for exp in group]
        rounds = sorted(set.intersection(*(set(c) for c in per_run)))
        median_curves[strategy] = [
            (rnd, float(np.median([c[rnd] for c in per_run]))) for rnd in rounds
        ]

    best = max(acc for curve in median_curves.values() for _, acc in curve)
    target = target_fraction * best
    reach = {s: rounds_to_target(median_curves[s], target) for s in strategies}

    manifest = {
        "base_config_hash": config_hash(base_config),
        "strategies": list(strategies),
        "trial_seeds": list(seeds),
        "target_fraction": target_fraction,
        "target_accuracy": target,
        "rounds_to_target": reach,
        "median_final_accuracy": {
            s: median_curves[s][-1][1] if median_curves[s] else None for s in strategies
        },
        "runs": [
            {
                "strategy": exp.config.strategy.kind,
                "seed": exp.manifest["seed"],
                "config_hash": exp.manifest["config_hash"],
                "rounds_completed": exp.manifest["rounds_completed"],
                "final_accuracy": exp.manifest["final_accuracy"],
                "final_loss": exp.manifest["final_loss"],
                "partition_sizes": exp.manifest["partition_sizes"],
                "flags": exp.manifest["flags"],
            }
            for exp in runs
        ],
        "versions": _versions(),
    }
    return SweepResult(runs, "".join(pieces), manifest, median_curves, target, reach)


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def write_manifest(path: Path, manifest: dict) -> None:
    write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
