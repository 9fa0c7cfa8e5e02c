"""Server-side aggregation rules for buffered asynchronous federated learning.

Four strategies share one weighted-update core:

* ``fedbuff``            x' = x - lr * (1/K) * sum(delta_i)
* ``staleness_decay``    weights w_i = (1 + tau_i)^(-a)
* ``contribution_aware`` weights w_i = P_i / S_i (or P_i * S_i), where
                         S_i is the drift-ratio staleness degree and
                         P_i = dataset_size * mean batch loss
* ``fedavg_sync``        synchronous baseline; requires every update to be
                         built on the current version

The reduction always runs in (client_id, upload_time) order so output bytes
do not depend on buffer arrival order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STRATEGY_KINDS = ("fedavg_sync", "fedbuff", "staleness_decay", "contribution_aware")
COMBINE_MODES = ("divide", "multiply")
NORMALIZE_MODES = ("none", "mean_one")

ZERO_WEIGHT_FLAG = "zero_weight_sum"


class MissingVersionError(KeyError):
    """A required historical model version was pruned or never stored.

    This is an internal invariant violation: the version history must retain
    every base version still referenced by an in-flight or buffered update.
    """


@dataclass
class LocalUpdate:
    """One client's uploaded contribution.

    ``delta`` is base model minus post-training model; ``base_version`` is
    the global version the client trained from; ``batch_loss_mean`` is the
    mean per-sample loss of a fresh batch from this client's data evaluated
    under the aggregating model (filled in at aggregation time);
    ``dataset_size`` is the client's partition size.
    """

    client_id: int
    delta: np.ndarray
    base_version: int
    batch_loss_mean: float
    dataset_size: int
    upload_time: float = 0.0

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.delta.ndim != 1:
            raise ValueError("delta must be a flat vector")
        if self.base_version < 0:
            raise ValueError("base_version must be non-negative")
        if self.batch_loss_mean < 0:
            raise ValueError("batch_loss_mean must be non-negative")
        if self.dataset_size < 1:
            raise ValueError("dataset_size must be positive")


class AggregationBuffer:
    """Holds at most ``capacity`` pending updates; the engine drains it when full."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("buffer capacity must be positive")
        self.capacity = capacity
        self.pending: list[LocalUpdate] = []

    def __len__(self) -> int:
        return len(self.pending)

    @property
    def is_full(self) -> bool:
        return len(self.pending) == self.capacity

    def add(self, update: LocalUpdate) -> None:
        if self.is_full:
            raise RuntimeError(f"buffer already holds {self.capacity} updates")
        self.pending.append(update)

    def drain(self) -> list[LocalUpdate]:
        updates, self.pending = self.pending, []
        return updates


@dataclass(frozen=True)
class StrategyConfig:
    """Aggregation strategy and its knobs.

    ``staleness_combine`` selects how the contribution-aware rule folds the
    staleness degree into the weight: "divide" (w = P/S, the verbatim rule)
    or "multiply" (w = P*S, down-weighting high-drift updates instead).
    ``normalize`` rescales weighted strategies' raw weights to mean one per
    buffer so step magnitude stays comparable to plain buffered averaging.
    """

    kind: str = "fedbuff"
    server_lr: float = 1.0
    eps: float = 1e-12
    staleness_combine: str = "divide"
    normalize: str = "mean_one"
    decay_exponent: float = 0.5

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}, expected one of {STRATEGY_KINDS}")
        if self.server_lr <= 0:
            raise ValueError("server_lr must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.staleness_combine not in COMBINE_MODES:
            raise ValueError(f"staleness_combine must be one of {COMBINE_MODES}")
        if self.normalize not in NORMALIZE_MODES:
            raise ValueError(f"normalize must be one of {NORMALIZE_MODES}")
        if self.decay_exponent <= 0:
            raise ValueError("decay_exponent must be positive")


@dataclass
class StrategyDiagnostics:
    """Per-aggregation bookkeeping, in (client_id, upload_time) order."""

    client_ids: list[int]
    taus: np.ndarray
    staleness: np.ndarray
    statistical: np.ndarray
    raw_weights: np.ndarray
    weights: np.ndarray
    flags: list[str] = field(default_factory=list)


def _sorted_updates(updates: list[LocalUpdate]) -> list[LocalUpdate]:
    return sorted(updates, key=lambda u: (u.client_id, u.upload_time))


def _check_inputs(x_t: np.ndarray, updates: list[LocalUpdate]) -> None:
    if not updates:
        raise ValueError("no updates to aggregate")
    for u in updates:
        if u.delta.size != x_t.size:
            raise ValueError(
                f"update from client {u.client_id} has dim {u.delta.size}, "
                f"model has dim {x_t.size}"
            )


def _weighted_update(
    x_t: np.ndarray,
    ordered: list[LocalUpdate],
    weights: np.ndarray,
    server_lr: float,
) -> np.ndarray:
    """x - lr * (1/K) * sum(w_i * delta_i), accumulated in the given order."""
    acc = np.zeros_like(x_t)
    for w, u in zip(weights, ordered):
        acc += w * u.delta
    return x_t - (server_lr / len(ordered)) * acc


def normalize_weights(raw: np.ndarray, mode: str) -> tuple[np.ndarray, bool]:
    """Apply the configured weight normalization.

    mean_one rescales to sum K (mean one); a zero raw sum falls back to
    uniform weights.  Returns the weights and whether the zero-sum case was
    hit (callers surface it as a metrics flag).
    """
    if mode not in NORMALIZE_MODES:
        raise ValueError(f"normalize must be one of {NORMALIZE_MODES}")
    total = float(raw.sum())
    if total == 0.0:
        if mode == "mean_one":
            return np.ones_like(raw), True
        return raw, True
    if mode == "none":
        return raw, False
    return raw * (len(raw) / total), False


def staleness_decay_weight(tau, exponent: float = 0.5) -> float:
    """Classic staleness decay (1 + tau)^(-exponent); 1 at tau=0, decreasing."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if exponent <= 0:
        raise ValueError("exponent must be positive")
    return float((1.0 + tau) ** (-exponent))


def staleness_scores(distances: np.ndarray, eps: float) -> np.ndarray:
    """Drift-ratio scores S_i = (min_j d_j + eps) / (d_i + eps).

    ``distances`` are squared model drifts.  Every score lies in (0, 1] and
    the argmin scores exactly 1 (its numerator equals its denominator).  A
    zero denominator (all-zero drift with eps=0) also scores 1, matching the
    eps -> 0 limit.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no distances given")
    if np.any(d < 0):
        raise ValueError("squared distances must be non-negative")
    num = d.min() + eps
    den = d + eps
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(den == 0.0, 1.0, num / den)
    return scores


def version_distances(x_t: np.ndarray, updates: list[LocalUpdate], history) -> np.ndarray:
    """Squared euclidean drift between x_t and each update's base version.

    ``history`` maps version number -> parameter vector and must contain
    every base version; a missing one raises (never substituted).
    """
    out = np.empty(len(updates))
    for i, u in enumerate(updates):
        base = history[u.base_version]
        diff = x_t - base
        out[i] = float(diff @ diff)
    return out


def staleness_degree(
    x_t: np.ndarray,
    updates: list[LocalUpdate],
    history,
    eps: float = 1e-12,
) -> np.ndarray:
    """Staleness degree per update, in the order the updates are given."""
    _check_inputs(x_t, updates)
    return staleness_scores(version_distances(x_t, updates, history), eps)


def statistical_effect(update: LocalUpdate) -> float:
    """Statistical importance P = dataset_size * mean batch loss."""
    return float(update.dataset_size * update.batch_loss_mean)


def _taus(updates: list[LocalUpdate], current_version: int) -> np.ndarray:
    taus = np.array([current_version - u.base_version for u in updates], dtype=np.int64)
    if np.any(taus < 0):
        bad = updates[int(np.argmin(taus))]
        raise ValueError(
            f"client {bad.client_id} has base_version {bad.base_version} beyond "
            f"current version {current_version}"
        )
    return taus


def _decay_weights(taus: np.ndarray, exponent: float) -> np.ndarray:
    return np.array([staleness_decay_weight(t, exponent) for t in taus])


def _contribution_weights(
    statistical: np.ndarray, staleness: np.ndarray, combine: str
) -> np.ndarray:
    if combine not in COMBINE_MODES:
        raise ValueError(f"staleness_combine must be one of {COMBINE_MODES}")
    if combine == "divide":
        return statistical / staleness
    return statistical * staleness


def fedbuff_aggregate(x_t: np.ndarray, updates: list[LocalUpdate], server_lr: float) -> np.ndarray:
    """Uniform buffered average: x' = x - lr * (1/K) * sum(delta_i)."""
    _check_inputs(x_t, updates)
    ordered = _sorted_updates(updates)
    return _weighted_update(x_t, ordered, np.ones(len(ordered)), server_lr)


def staleness_decay_aggregate(
    x_t: np.ndarray,
    updates: list[LocalUpdate],
    current_version: int,
    server_lr: float,
    exponent: float = 0.5,
    normalize: str = "mean_one",
) -> np.ndarray:
    """Buffered update with per-update decay weights (1 + tau)^(-exponent)."""
    _check_inputs(x_t, updates)
    ordered = _sorted_updates(updates)
    raw = _decay_weights(_taus(ordered, current_version), exponent)
    weights, _ = normalize_weights(raw, normalize)
    return _weighted_update(x_t, ordered, weights, server_lr)


def contribution_aware_aggregate(
    x_t: np.ndarray,
    updates: list[LocalUpdate],
    history,
    cfg: StrategyConfig,
) -> np.ndarray:
    """Weight each update by statistical effect and staleness degree.

    With ``staleness_combine="divide"`` the raw weight is P_i / S_i; all-zero
    weights still produce a result (the model is left unchanged under
    normalize="none").
    """
    if cfg.kind != "contribution_aware":
        raise ValueError(f"config is for strategy {cfg.kind!r}, not contribution_aware")
    _check_inputs(x_t, updates)
    ordered = _sorted_updates(updates)
    staleness = staleness_degree(x_t, ordered, history, cfg.eps)
    statistical = np.array([statistical_effect(u) for u in ordered])
    raw = _contribution_weights(statistical, staleness, cfg.staleness_combine)
    weights, _ = normalize_weights(raw, cfg.normalize)
    return _weighted_update(x_t, ordered, weights, cfg.server_lr)


def fedavg_sync_round(
    x_t: np.ndarray,
    updates: list[LocalUpdate],
    current_version: int,
    server_lr: float,
) -> np.ndarray:
    """Synchronous round: uniform average of one fresh update per client.

    Any update not built on the current version breaks the synchrony
    contract and raises.
    """
    _check_inputs(x_t, updates)
    for u in updates:
        if u.base_version != current_version:
            raise ValueError(
                f"synchronous round requires base_version == {current_version}, "
                f"client {u.client_id} has {u.base_version}"
            )
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ValueError("synchronous round requires one update per client")
    ordered = _sorted_updates(updates)
    return _weighted_update(x_t, ordered, np.ones(len(ordered)), server_lr)


def apply_strategy(
    x_t: np.ndarray,
    updates: list[LocalUpdate],
    history,
    current_version: int,
    cfg: StrategyConfig,
) -> tuple[np.ndarray, StrategyDiagnostics]:
    """Run the configured strategy and report per-update diagnostics.

    The staleness degree and statistical effect are computed for every
    strategy (they feed the metrics trace) but only influence the update
    under the strategies that use them.
    """
    _check_inputs(x_t, updates)
    ordered = _sorted_updates(updates)
    taus = _taus(ordered, current_version)
    staleness = staleness_degree(x_t, ordered, history, cfg.eps)
    statistical = np.array([statistical_effect(u) for u in ordered])
    flags: list[str] = []

    if cfg.kind == "fedbuff":
        raw = np.ones(len(ordered))
        weights = raw
    elif cfg.kind == "fedavg_sync":
        # delegate the synchrony checks, then weight uniformly
        raw = np.ones(len(ordered))
        weights = raw
        return (
            fedavg_sync_round(x_t, updates, current_version, cfg.server_lr),
            StrategyDiagnostics([u.client_id for u in ordered], taus, staleness, statistical, raw, weights, flags),
        )
    elif cfg.kind == "staleness_decay":
        raw = _decay_weights(taus, cfg.decay_exponent)
        weights, zero_sum = normalize_weights(raw, cfg.normalize)
        if zero_sum:
            flags.append(ZERO_WEIGHT_FLAG)
    else:
        raw = _contribution_weights(statistical, staleness, cfg.staleness_combine)
        weights, zero_sum = normalize_weights(raw, cfg.normalize)
        if zero_sum:
            flags.append(ZERO_WEIGHT_FLAG)

    x_next = _weighted_update(x_t, ordered, weights, cfg.server_lr)
    diag = StrategyDiagnostics(
        [u.client_id for u in ordered], taus, staleness, statistical, raw, weights, flags
    )
    return x_next, diag
