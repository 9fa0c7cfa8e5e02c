"""Deterministic discrete-event loop: N clients training against one buffered server.

Two event kinds drive everything, totally ordered by (time, sequence number):

* upload-complete: the client's finished job becomes a LocalUpdate and joins
  the buffer; if that fills the buffer, an aggregation fires immediately.
* job-start: the client fetches the current global version and schedules its
  next upload.

A finishing client's job-start is scheduled at the same simulated time as its
upload but with a later sequence number.  This matters when several clients
finish simultaneously: any aggregation triggered inside the group runs before
the group re-fetches, so with equal fixed speeds and a buffer the size of the
fleet every client restarts from the freshly aggregated model (staleness zero
every round, exactly the synchronous schedule).

Randomness is split into non-overlapping streams so that, e.g., the speed
seed never perturbs batch sampling: per-client job batches use
(sampling_seed, 0, client, job), per-client loss batches (sampling_seed, 1,
client), per-client speeds (speed_seed, client).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from .aggregation import (
    AggregationBuffer,
    LocalUpdate,
    MissingVersionError,
    StrategyConfig,
    apply_strategy,
)
from .data import Dataset, PartitionPlan, sample_batch
from .model import ModelArch, batch_loss_sum, evaluate, init_params, local_train

if TYPE_CHECKING:
    from .config import RunConfig

EVENT_UPLOAD = "upload"
EVENT_START = "start"

SPEED_KINDS = ("fixed", "two_tier", "lognormal")


class SimEvent(NamedTuple):
    """Queue entry; heap order is (time, seq), seq being globally unique."""

    time: float
    seq: int
    kind: str
    client_id: int


@dataclass(frozen=True)
class ClientSpeedModel:
    """How long one local job takes, in simulated seconds.

    fixed      always base_duration
    two_tier   the floor(slow_fraction * N) lowest client ids take
               base_duration * slow_multiplier, the rest base_duration
    lognormal  base_duration * exp(Normal(mu, sigma)) per job
    """

    kind: str = "fixed"
    base_duration: float = 1.0
    slow_fraction: float = 0.5
    slow_multiplier: float = 4.0
    mu: float = 0.0
    sigma: float = 0.5

    def __post_init__(self):
        if self.kind not in SPEED_KINDS:
            raise ValueError(f"unknown speed kind {self.kind!r}, expected one of {SPEED_KINDS}")
        if self.base_duration <= 0:
            raise ValueError("base_duration must be positive")
        if not 0.0 <= self.slow_fraction <= 1.0:
            raise ValueError("slow_fraction must lie in [0, 1]")
        if self.slow_multiplier <= 0:
            raise ValueError("slow_multiplier must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def draw_duration(
    model: ClientSpeedModel,
    client_id: int,
    n_clients: int,
    rng: np.random.Generator,
) -> float:
    """Next job duration for one client; strictly positive, deterministic in rng."""
    if model.kind == "fixed":
        return model.base_duration
    if model.kind == "two_tier":
        slow_count = int(math.floor(model.slow_fraction * n_clients))
        if client_id < slow_count:
            return model.base_duration * model.slow_multiplier
        return model.base_duration
    return model.base_duration * float(np.exp(rng.normal(model.mu, model.sigma)))


class VersionHistory:
    """Global model vectors by version, kept while any client still needs them."""

    def __init__(self, initial_params: np.ndarray):
        self.entries: dict[int, np.ndarray] = {0: initial_params}
        self.current_version = 0

    def __contains__(self, version: int) -> bool:
        return version in self.entries

    def __getitem__(self, version: int) -> np.ndarray:
        try:
            return self.entries[version]
        except KeyError:
            raise MissingVersionError(
                f"model version {version} is not in the history "
                f"(current {self.current_version}, kept {sorted(self.entries)})"
            ) from None

    def put(self, version: int, params: np.ndarray) -> None:
        self.entries[version] = params
        self.current_version = version

    def versions(self) -> list[int]:
        return sorted(self.entries)


def prune_history(history: VersionHistory, in_flight_bases, buffered_bases) -> int:
    """Drop every version below the oldest still-needed one.

    Needed versions are the bases of in-flight and buffered updates plus the
    current version; exactly the versions below their minimum are removed.
    Returns how many were dropped.
    """
    if history.current_version not in history.entries:
        raise MissingVersionError(f"current version {history.current_version} missing")
    needed = set(in_flight_bases) | set(buffered_bases) | {history.current_version}
    cutoff = min(needed)
    stale = [v for v in history.entries if v < cutoff]
    for v in stale:
        del history.entries[v]
    return len(stale)


@dataclass
class ClientState:
    client_id: int
    features: np.ndarray
    labels: np.ndarray
    dataset_size: int
    base_version: int
    job_index: int
    phase: str  # "training" (upload pending) or "starting" (job-start pending)
    speed_rng: np.random.Generator
    loss_rng: np.random.Generator


@dataclass
class RoundRecord:
    """Full diagnostics of one aggregation, clients in id order."""

    round: int
    sim_time: float
    client_ids: list[int]
    taus: np.ndarray
    staleness: np.ndarray
    statistical: np.ndarray
    raw_weights: np.ndarray
    weights: np.ndarray
    flags: list[str]


@dataclass
class MetricsRow:
    """One evaluation point of the metrics trace.

    Round 0 is the pre-training baseline; its aggregation statistics are
    None.  ``flags`` joins any per-round warning flags with '|'.
    """

    round: int
    sim_time: float
    test_accuracy: float
    test_loss: float
    mean_tau: float | None = None
    max_tau: int | None = None
    mean_s: float | None = None
    mean_raw_weight: float | None = None
    flags: str = ""


@dataclass
class StepReport:
    kind: str
    time: float
    client_id: int
    aggregation: RoundRecord | None = None


@dataclass
class SimState:
    config: "RunConfig"
    dataset: Dataset
    plan: PartitionPlan
    arch: ModelArch
    strategy: StrategyConfig
    clients: list[ClientState]
    history: VersionHistory
    buffer: AggregationBuffer
    clock: float = 0.0
    seq: int = 0
    events: list[SimEvent] = field(default_factory=list)
    rounds_completed: int = 0
    round_records: list[RoundRecord] = field(default_factory=list)
    drawn_durations: list[float] = field(default_factory=list)

    def schedule(self, time: float, kind: str, client_id: int) -> None:
        heapq.heappush(self.events, SimEvent(time, self.seq, kind, client_id))
        self.seq += 1


def init_sim(config: "RunConfig", dataset: Dataset, plan: PartitionPlan) -> SimState:
    """Build the initial state: model at version 0, every client training on it."""
    arch = ModelArch(tuple(config.arch))
    if plan.client_count != config.clients:
        raise ValueError(
            f"plan has {plan.client_count} clients, config says {config.clients}"
        )
    if dataset.dim != arch.input_dim:
        raise ValueError(
            f"dataset dim {dataset.dim} does not match arch input {arch.input_dim}"
        )
    if dataset.class_count != arch.class_count:
        raise ValueError(
            f"dataset has {dataset.class_count} classes, arch outputs {arch.class_count}"
        )

    params = init_params(arch, config.seeds.model)
    clients = []
    for cid in range(config.clients):
        idx = plan.assignments[cid]
        clients.append(
            ClientState(
                client_id=cid,
                features=dataset.features[idx],
                labels=dataset.labels[idx],
                dataset_size=len(idx),
                base_version=0,
                job_index=0,
                phase="training",
                speed_rng=np.random.default_rng((config.seeds.speed, cid)),
                loss_rng=np.random.default_rng((config.seeds.sampling, 1, cid)),
            )
        )

    state = SimState(
        config=config,
        dataset=dataset,
        plan=plan,
        arch=arch,
        strategy=config.strategy,
        clients=clients,
        history=VersionHistory(params),
        buffer=AggregationBuffer(config.buffer_size),
    )
    for cs in clients:
        duration = draw_duration(config.speed, cs.client_id, config.clients, cs.speed_rng)
        state.drawn_durations.append(duration)
        state.schedule(duration, EVENT_UPLOAD, cs.client_id)
    return state


def _aggregate(state: SimState) -> RoundRecord:
    """Fire one aggregation: score the buffer, apply the strategy, advance the version."""
    t = state.history.current_version
    x_t = state.history[t]
    updates = state.buffer.pending
    for u in sorted(updates, key=lambda v: v.client_id):
        cs = state.clients[u.client_id]
        batch = sample_batch(
            state.plan, u.client_id, state.dataset, state.config.batch_size, cs.loss_rng
        )
        u.batch_loss_mean = batch_loss_sum(x_t, state.arch, batch) / batch.size

    x_next, diag = apply_strategy(x_t, updates, state.history, t, state.strategy)
    state.buffer.drain()
    state.history.put(t + 1, x_next)
    state.rounds_completed += 1

    record = RoundRecord(
        round=t + 1,
        sim_time=state.clock,
        client_ids=diag.client_ids,
        taus=diag.taus,
        staleness=diag.staleness,
        statistical=diag.statistical,
        raw_weights=diag.raw_weights,
        weights=diag.weights,
        flags=diag.flags,
    )
    state.round_records.append(record)

    in_flight = [cs.base_version for cs in state.clients if cs.phase == "training"]
    buffered = [u.base_version for u in state.buffer.pending]
    prune_history(state.history, in_flight, buffered)
    return record


def step(state: SimState) -> StepReport | None:
    """Process the next event; None signals an empty queue (simulation complete)."""
    if not state.events:
        return None
    event = heapq.heappop(state.events)
    if event.time < state.clock:
        raise RuntimeError(f"event time {event.time} precedes clock {state.clock}")
    state.clock = event.time
    cs = state.clients[event.client_id]

    if event.kind == EVENT_UPLOAD:
        base = state.history[cs.base_version]
        delta, _ = local_train(
            base,
            state.arch,
            cs.features,
            cs.labels,
            state.config.local_steps,
            state.config.local_lr,
            state.config.batch_size,
            (state.config.seeds.sampling, 0, cs.client_id, cs.job_index),
        )
        update = LocalUpdate(
            client_id=cs.client_id,
            delta=delta,
            base_version=cs.base_version,
            batch_loss_mean=0.0,
            dataset_size=cs.dataset_size,
            upload_time=event.time,
        )
        cs.phase = "starting"
        state.buffer.add(update)
        record = _aggregate(state) if state.buffer.is_full else None
        state.schedule(event.time, EVENT_START, cs.client_id)
        return StepReport(EVENT_UPLOAD, event.time, cs.client_id, record)

    # job-start: fetch the current version and schedule the next upload
    cs.base_version = state.history.current_version
    cs.job_index += 1
    cs.phase = "training"
    duration = draw_duration(state.config.speed, cs.client_id, state.config.clients, cs.speed_rng)
    state.drawn_durations.append(duration)
    state.schedule(event.time + duration, EVENT_UPLOAD, cs.client_id)
    return StepReport(EVENT_START, event.time, cs.client_id)


@dataclass
class RunResult:
    """Metrics trace plus full diagnostics of one simulation run."""

    rows: list[MetricsRow]
    round_records: list[RoundRecord]
    final_params: np.ndarray
    final_accuracy: float
    final_loss: float
    drawn_durations: list[float]


def _metrics_row(record: RoundRecord, accuracy: float, loss: float) -> MetricsRow:
    return MetricsRow(
        round=record.round,
        sim_time=record.sim_time,
        test_accuracy=accuracy,
        test_loss=loss,
        mean_tau=float(np.mean(record.taus)),
        max_tau=int(np.max(record.taus)),
        mean_s=float(np.mean(record.staleness)),
        mean_raw_weight=float(np.mean(record.raw_weights)),
        flags="|".join(record.flags),
    )


def run(
    config: "RunConfig",
    dataset: Dataset,
    plan: PartitionPlan,
    test_dataset: Dataset,
) -> RunResult:
    """Simulate until max_rounds aggregations or max_sim_time, whichever first.

    The metrics trace starts with a round-0 pre-training evaluation and adds
    one row per aggregation round that is a multiple of ``eval_every``, each
    carrying that round's staleness and weight statistics.
    """
    state = init_sim(config, dataset, plan)
    arch = state.arch
    accuracy, loss = evaluate(
        state.history[0], arch, test_dataset.features, test_dataset.labels
    )
    rows = [MetricsRow(round=0, sim_time=0.0, test_accuracy=accuracy, test_loss=loss)]

    while state.rounds_completed < config.max_rounds:
        if not state.events:
            break
        if config.max_sim_time is not None and state.events[0].time > config.max_sim_time:
            break
        report = step(state)
        if report is None:
            break
        record = report.aggregation
        if record is not None and record.round % config.eval_every == 0:
            accuracy, loss = evaluate(
                state.history[record.round], arch, test_dataset.features, test_dataset.labels
            )
            rows.append(_metrics_row(record, accuracy, loss))

    final = state.history[state.history.current_version]
    final_accuracy, final_loss = evaluate(final, arch, test_dataset.features, test_dataset.labels)
    return RunResult(
        rows=rows,
        round_records=state.round_records,
        final_params=final,
        final_accuracy=final_accuracy,
        final_loss=final_loss,
        drawn_durations=state.drawn_durations,
    )
