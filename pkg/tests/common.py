"""Shared builders for the test suite."""

import dataclasses

import numpy as np

from aflsim.aggregation import LocalUpdate
from aflsim.config import parse_config
from aflsim.engine import ClientSpeedModel, VersionHistory


def tiny_config(**overrides):
    """A small, fast run configuration; pass whole nested objects to override."""
    cfg = parse_config("{}")
    cfg = dataclasses.replace(
        cfg,
        dataset=dataclasses.replace(
            cfg.dataset, classes=3, dim=6, n_per_class=60, test_fraction=0.2
        ),
        clients=6,
        buffer_size=2,
        local_steps=3,
        batch_size=16,
        max_rounds=8,
    )
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def two_tier(slow_fraction=0.5, slow_multiplier=4.0, base_duration=1.0):
    return ClientSpeedModel(
        kind="two_tier",
        base_duration=base_duration,
        slow_fraction=slow_fraction,
        slow_multiplier=slow_multiplier,
    )


def random_updates(rng, k, dim, max_tau=0, current_version=0):
    """k random updates with distinct client ids and bases within max_tau."""
    updates = []
    for cid in range(k):
        tau = int(rng.integers(0, max_tau + 1))
        updates.append(
            LocalUpdate(
                client_id=cid,
                delta=rng.normal(size=dim),
                base_version=current_version - tau,
                batch_loss_mean=float(rng.uniform(0.01, 3.0)),
                dataset_size=int(rng.integers(1, 200)),
                upload_time=float(rng.uniform(0, 10)),
            )
        )
    return updates


def history_covering(rng, updates, x_t, current_version):
    """A VersionHistory holding x_t at current_version and random vectors at
    every base version the updates reference."""
    history = VersionHistory(np.zeros_like(x_t))
    for v in sorted({u.base_version for u in updates} | {current_version}):
        history.put(v, rng.normal(size=x_t.size))
    history.entries[current_version] = x_t
    history.current_version = current_version
    return history
