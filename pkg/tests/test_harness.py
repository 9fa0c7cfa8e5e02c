"""Harness: dataset assembly, CSV schema, experiment runs and sweeps."""

import dataclasses

import numpy as np
import pytest

from aflsim.config import parse_config
from aflsim.engine import MetricsRow
from aflsim.harness import (
    CSV_HEADER,
    SweepRunError,
    accuracy_by_round,
    build_datasets,
    build_partition,
    resolve_arch,
    rounds_to_target,
    rows_to_csv,
    run_experiment,
    run_sweep,
    trial_seeds,
)

from common import tiny_config, two_tier


def test_build_datasets_stratified_split():
    cfg = tiny_config()  # 3 classes x 60, test_fraction 0.2
    train, test = build_datasets(cfg)
    assert train.size == 3 * 48 and test.size == 3 * 12
    assert np.array_equal(np.bincount(train.labels), np.full(3, 48))
    assert np.array_equal(np.bincount(test.labels), np.full(3, 12))
    again = build_datasets(cfg)
    assert np.array_equal(train.features, again[0].features)
    assert np.array_equal(test.features, again[1].features)


def test_default_config_matches_protocol_sizes():
    """Defaults give 45000 train / 10000 test and 1500 per client."""
    cfg = parse_config("{}")
    train, test = build_datasets(cfg)
    assert train.size == 45000
    assert test.size == 10000
    plan = build_partition(cfg, train)
    assert plan.sizes() == [1500] * 30


def test_resolve_arch_default_and_mismatch():
    cfg = tiny_config()
    train, _ = build_datasets(cfg)
    resolved = resolve_arch(cfg, train)
    assert resolved.arch == [6, 64, 3]
    explicit = dataclasses.replace(cfg, arch=[6, 10, 3])
    assert resolve_arch(explicit, train).arch == [6, 10, 3]
    with pytest.raises(ValueError):
        resolve_arch(dataclasses.replace(cfg, arch=[5, 10, 3]), train)


def test_csv_header_is_fixed():
    text = rows_to_csv([], "fedbuff", 1)
    assert text == "round,sim_time,strategy,seed,test_accuracy,test_loss,mean_tau,max_tau,mean_S,mean_raw_weight,flags\n"
    assert ",".join(CSV_HEADER) == text.strip()


def test_csv_row_formatting():
    rows = [
        MetricsRow(round=0, sim_time=0.0, test_accuracy=0.5, test_loss=1.25),
        MetricsRow(round=1, sim_time=2.5, test_accuracy=0.75, test_loss=1.0,
                   mean_tau=0.5, max_tau=2, mean_s=1.0, mean_raw_weight=3.0,
                   flags="zero_weight_sum"),
    ]
    text = rows_to_csv(rows, "fedbuff", 7)
    lines = text.splitlines()
    assert lines[1] == "0,0.0,fedbuff,7,0.5,1.25,,,,,"
    assert lines[2] == "1,2.5,fedbuff,7,0.75,1.0,0.5,2,1.0,3.0,zero_weight_sum"


def test_run_experiment_row_count_contract():
    # 5 rounds at eval_every=1: five per-round rows after the baseline row
    exp = run_experiment(tiny_config(max_rounds=5))
    rounds = [row.round for row in exp.result.rows]
    assert rounds == [0, 1, 2, 3, 4, 5]
    assert len([r for r in rounds if r >= 1]) == 5
    assert exp.manifest["rounds_completed"] == 5
    assert len(exp.csv_text.splitlines()) == 1 + 6


def test_run_experiment_is_byte_identical():
    cfg = tiny_config(max_rounds=6)
    cfg = dataclasses.replace(cfg, speed=two_tier())
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    assert a.csv_text == b.csv_text
    assert a.manifest == b.manifest


def test_manifest_contents_and_no_timestamps():
    exp = run_experiment(tiny_config(max_rounds=3))
    m = exp.manifest
    assert set(m) == {
        "config_hash", "strategy", "seed", "seeds", "rounds_completed",
        "final_accuracy", "final_loss", "partition_sizes", "flags", "versions",
    }
    assert m["strategy"] == "fedbuff"
    assert len(m["config_hash"]) == 64
    assert m["partition_sizes"] == exp.plan.sizes()
    assert "numpy" in m["versions"] and "python" in m["versions"]
    for key in m:
        assert "time" not in key and "date" not in key


def test_trial_seeds_derivation():
    s = trial_seeds(3)
    assert (s.model, s.data, s.speed, s.sampling) == (31, 32, 33, 34)
    assert trial_seeds(3) == s
    with pytest.raises(ValueError):
        trial_seeds(-1)


def test_rounds_to_target_linear_scan():
    curve = [(0, 0.1), (1, 0.3), (2, 0.5), (42, 0.95), (50, 0.99)]
    assert rounds_to_target(curve, 0.9) == 42
    assert rounds_to_target(curve, 0.05) == 0
    assert rounds_to_target(curve, 1.0) is None


def test_sweep_single_run_equals_run_experiment():
    base = tiny_config(max_rounds=4)
    sweep = run_sweep(base, ["fedbuff"], [1])
    solo = run_experiment(
        dataclasses.replace(base, seeds=trial_seeds(1)), seed_label=1
    )
    assert sweep.csv_text == solo.csv_text
    assert sweep.median_curves["fedbuff"] == [
        (row.round, row.test_accuracy) for row in solo.result.rows
    ]


def test_sweep_counts_isolation_and_median():
    base = tiny_config(max_rounds=4)
    base = dataclasses.replace(base, speed=two_tier())
    sweep = run_sweep(base, ["fedbuff", "contribution_aware"], [1, 2, 3])
    assert len(sweep.runs) == 6
    # identical baseline row across strategies at the same trial seed
    grouped = {}
    for exp in sweep.runs:
        grouped.setdefault(exp.manifest["seed"], []).append(exp.result.rows[0])
    for rows0 in grouped.values():
        accs = {row.test_accuracy for row in rows0}
        losses = {row.test_loss for row in rows0}
        assert len(accs) == 1 and len(losses) == 1
    # median curve is the per-round median over trials
    fb = [exp for exp in sweep.runs if exp.manifest["strategy"] == "fedbuff"]
    per_run = [accuracy_by_round(exp.result.rows) for exp in fb]
    for rnd, med in sweep.median_curves["fedbuff"]:
        assert med == float(np.median([c[rnd] for c in per_run]))
    assert set(sweep.manifest["rounds_to_target"]) == {"fedbuff", "contribution_aware"}
    assert len(sweep.manifest["runs"]) == 6


def test_sweep_csv_is_ordered_by_strategy_then_seed():
    base = tiny_config(max_rounds=2)
    sweep = run_sweep(base, ["staleness_decay", "fedbuff"], [2, 1])
    seen = []
    for line in sweep.csv_text.splitlines()[1:]:
        parts = line.split(",")
        pair = (parts[2], int(parts[3]))
        if pair not in seen:
            seen.append(pair)
    assert seen == [
        ("staleness_decay", 2), ("staleness_decay", 1), ("fedbuff", 2), ("fedbuff", 1),
    ]


def test_sweep_flush_called_per_completed_run():
    base = tiny_config(max_rounds=2)
    calls = []
    run_sweep(base, ["fedbuff"], [1, 2],
              flush=lambda s, seed, piece, exp: calls.append((s, seed, len(piece))))
    assert [(s, seed) for s, seed, _ in calls] == [("fedbuff", 1), ("fedbuff", 2)]
    assert all(n > 0 for _, _, n in calls)


def test_sweep_failure_names_the_run():
    base = tiny_config(max_rounds=2)  # 6 clients, K=2: invalid for fedavg_sync
    with pytest.raises(SweepRunError, match="strategy=fedavg_sync seed=1"):
        run_sweep(base, ["fedbuff", "fedavg_sync"], [1])


def test_sweep_argument_validation():
    base = tiny_config()
    with pytest.raises(ValueError):
        run_sweep(base, [], [1])
    with pytest.raises(ValueError):
        run_sweep(base, ["fedbuff"], [])
    with pytest.raises(ValueError):
        run_sweep(base, ["fedbuff"], [1], target_fraction=0.0)
