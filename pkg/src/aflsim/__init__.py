"""Deterministic discrete-event simulator for buffered asynchronous federated learning.

Clients train a small feed-forward classifier on non-IID partitions of a
dataset and upload cumulative updates to a server that aggregates whenever a
buffer of K updates fills.  Several server-side weighting rules are provided
(uniform buffered averaging, staleness decay, contribution-aware weighting,
and a synchronous baseline), all driven by a single seeded event loop so that
every run is bit-reproducible.
"""

__version__ = "0.1.0"

from .aggregation import (
    AggregationBuffer,
    LocalUpdate,
    StrategyConfig,
    contribution_aware_aggregate,
    fedavg_sync_round,
    fedbuff_aggregate,
    staleness_decay_aggregate,
    staleness_decay_weight,
    staleness_degree,
    statistical_effect,
)
from .config import RunConfig, parse_config, serialize_config
from .data import Dataset, PartitionPlan, generate_synthetic, load_idx, partition, sample_batch
from .engine import ClientSpeedModel, MetricsRow, RunResult, SimState, VersionHistory, init_sim, run
from .model import Batch, ModelArch, batch_loss_sum, evaluate, gradient, init_params, local_train

__all__ = [
    "AggregationBuffer",
    "Batch",
    "ClientSpeedModel",
    "Dataset",
    "LocalUpdate",
    "MetricsRow",
    "ModelArch",
    "PartitionPlan",
    "RunConfig",
    "RunResult",
    "SimState",
    "StrategyConfig",
    "VersionHistory",
    "batch_loss_sum",
    "contribution_aware_aggregate",
    "evaluate",
    "fedavg_sync_round",
    "fedbuff_aggregate",
    "generate_synthetic",
    "gradient",
    "init_params",
    "init_sim",
    "load_idx",
    "local_train",
    "parse_config",
    "partition",
    "run",
    "sample_batch",
    "serialize_config",
    "staleness_decay_aggregate",
    "staleness_decay_weight",
    "staleness_degree",
    "statistical_effect",
]
