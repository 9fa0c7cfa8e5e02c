"""Run configuration: JSON in, validated dataclasses out, canonical JSON back.

A config file is one JSON object with nested sections (dataset, partition,
strategy, speed, seeds) plus top-level scalars.  Every key has a default, so
the empty object {} is a valid config.  Unknown keys are rejected rather than
ignored to catch typos early.  serialize_config() emits a canonical form whose
parse is equal to the original, which also gives a stable content hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .aggregation import StrategyConfig
from .engine import ClientSpeedModel

DATASET_KINDS = ("synthetic", "idx")


@dataclass(frozen=True)
class DatasetConfig:
    """Where the data comes from.

    synthetic: class-blob generation, split into train/test by test_fraction.
    idx: four file paths, train and test pairs, already split.
    """

    kind: str = "synthetic"
    classes: int = 10
    dim: int = 32
    n_per_class: int = 5500
    spread: float = 0.3
    test_fraction: float = 2.0 / 11.0
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}, expected one of {DATASET_KINDS}")
        if self.kind == "synthetic":
            if self.classes < 2:
                raise ValueError("dataset.classes must be at least 2")
            if self.dim < 2:
                raise ValueError("dataset.dim must be at least 2")
            if self.n_per_class < 2:
                raise ValueError("dataset.n_per_class must be at least 2")
            if self.spread < 0:
                raise ValueError("dataset.spread must be non-negative")
            if not 0.0 < self.test_fraction < 1.0:
                raise ValueError("dataset.test_fraction must lie strictly between 0 and 1")
            per_class_test = int(round(self.test_fraction * self.n_per_class))
            if per_class_test < 1 or per_class_test >= self.n_per_class:
                raise ValueError(
                    "dataset.test_fraction leaves no train or no test samples per class"
                )
        else:
            for name in ("images", "labels", "test_images", "test_labels"):
                if getattr(self, name) is None:
                    raise ValueError(f"dataset.{name} is required when dataset.kind is 'idx'")


@dataclass(frozen=True)
class PartitionConfig:
    scheme: str = "label_shard"
    shards_per_client: int = 2
    alpha: float = 0.5

    def __post_init__(self):
        if self.scheme not in ("iid", "label_shard", "dirichlet"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.shards_per_client < 1:
            raise ValueError("partition.shards_per_client must be positive")
        if self.alpha <= 0:
            raise ValueError("partition.alpha must be positive")


@dataclass(frozen=True)
class Seeds:
    """Independent seeds for the four random decisions a run makes."""

    model: int = 1
    data: int = 2
    speed: int = 3
    sampling: int = 4

    def __post_init__(self):
        values = (self.model, self.data, self.speed, self.sampling)
        for name, v in zip(("model", "data", "speed", "sampling"), values):
            if v < 0:
                raise ValueError(f"seeds.{name} must be non-negative")
        if len(set(values)) != 4:
            raise ValueError(
                "seeds.model, seeds.data, seeds.speed and seeds.sampling must be pairwise distinct"
            )


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = DatasetConfig()
    clients: int = 30
    partition: PartitionConfig = PartitionConfig()
    arch: list[int] | None = None
    local_steps: int = 10
    local_lr: float = 0.05
    batch_size: int = 32
    strategy: StrategyConfig = StrategyConfig()
    buffer_size: int = 10
    speed: ClientSpeedModel = ClientSpeedModel()
    seeds: Seeds = Seeds()
    max_rounds: int = 300
    max_sim_time: float | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.clients < 1:
            raise ValueError("clients must be positive")
        if self.buffer_size < 1:
            raise ValueError("buffer_size must be positive")
        if self.buffer_size > self.clients:
            raise ValueError(
                f"buffer_size {self.buffer_size} exceeds the client count {self.clients}; "
                "at most one update per client can be outstanding"
            )
        if self.arch is not None:
            if len(self.arch) < 2:
                raise ValueError("arch needs an input and an output layer")
            if any(d < 1 for d in self.arch):
                raise ValueError("arch layer sizes must be positive")
        if self.local_steps < 1:
            raise ValueError("local_steps must be positive")
        if self.local_lr <= 0:
            raise ValueError("local_lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be non-negative")
        if self.max_sim_time is not None and self.max_sim_time <= 0:
            raise ValueError("max_sim_time must be positive when set")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")
        if self.strategy.kind == "fedavg_sync":
            if self.buffer_size != self.clients:
                raise ValueError(
                    "strategy fedavg_sync requires buffer_size equal to clients "
                    f"(got buffer_size {self.buffer_size}, clients {self.clients})"
                )
            if self.speed.kind != "fixed":
                raise ValueError(
                    "strategy fedavg_sync requires the fixed speed model so that "
                    "rounds stay synchronous"
                )


class ConfigError(ValueError):
    """A config file failed to parse or validate."""


def _expect(obj, section: str, allowed: dict):
    """Check obj is a dict with only allowed keys; return it."""
    if not isinstance(obj, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section {section!r}")
    return obj


def _typed(section: str, obj: dict, key: str, kinds, default):
    if key not in obj:
        return default
    value = obj[key]
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{section}.{key} may not be null")
    # bool is an int subclass, but "true" is never a valid count or seed here
    if isinstance(value, bool) or not isinstance(value, kinds):
        want = kinds[0].__name__ if isinstance(kinds, tuple) else kinds.__name__
        raise ConfigError(f"{section}.{key} must be a {want}, got {value!r}")
    return value


def _build_section(section: str, obj: dict, cls, fields: dict):
    """Construct a config dataclass from a JSON dict with per-field type checks."""
    _expect(obj, section, fields)
    kwargs = {}
    for key, kinds in fields.items():
        if key in obj:
            default = getattr(cls, "__dataclass_fields__")[key].default
            if default is dataclasses.MISSING:
                default = None
            value = _typed(section, obj, key, kinds, default)
            if kinds == (float, int) and value is not None:
                value = float(value)
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from None


_NUM = (float, int)

_TOP_FIELDS = {
    "dataset": dict,
    "clients": int,
    "partition": dict,
    "arch": list,
    "local_steps": int,
    "local_lr": _NUM,
    "batch_size": int,
    "strategy": dict,
    "buffer_size": int,
    "speed": dict,
    "seeds": dict,
    "max_rounds": int,
    "max_sim_time": _NUM,
    "eval_every": int,
}

_DATASET_FIELDS = {
    "kind": str, "classes": int, "dim": int, "n_per_class": int,
    "spread": _NUM, "test_fraction": _NUM,
    "images": str, "labels": str, "test_images": str, "test_labels": str,
}
_PARTITION_FIELDS = {"scheme": str, "shards_per_client": int, "alpha": _NUM}
_STRATEGY_FIELDS = {
    "kind": str, "server_lr": _NUM, "eps": _NUM,
    "staleness_combine": str, "normalize": str, "decay_exponent": _NUM,
}
_SPEED_FIELDS = {
    "kind": str, "base_duration": _NUM, "slow_fraction": _NUM,
    "slow_multiplier": _NUM, "mu": _NUM, "sigma": _NUM,
}
_SEED_FIELDS = {"model": int, "data": int, "speed": int, "sampling": int}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate a JSON config string.

    Raises ConfigError naming the offending key or field; JSON syntax errors
    keep their line and column.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    _expect(raw, "top level", _TOP_FIELDS)

    dataset = _build_section("dataset", raw.get("dataset", {}), DatasetConfig, _DATASET_FIELDS)
    partition = _build_section("partition", raw.get("partition", {}), PartitionConfig, _PARTITION_FIELDS)
    strategy = _build_section("strategy", raw.get("strategy", {}), StrategyConfig, _STRATEGY_FIELDS)
    speed = _build_section("speed", raw.get("speed", {}), ClientSpeedModel, _SPEED_FIELDS)
    seeds = _build_section("seeds", raw.get("seeds", {}), Seeds, _SEED_FIELDS)

    arch = raw.get("arch")
    if arch is not None:
        if not isinstance(arch, list) or not all(
            isinstance(d, int) and not isinstance(d, bool) for d in arch
        ):
            raise ConfigError("arch must be a list of integers")

    kwargs = {
        "dataset": dataset,
        "partition": partition,
        "strategy": strategy,
        "speed": speed,
        "seeds": seeds,
        "arch": arch,
    }
    for key in ("clients", "local_steps", "batch_size", "buffer_size", "max_rounds", "eval_every"):
        if key in raw:
            value = _typed("top level", raw, key, int, None)
            if value is None:
                raise ConfigError(f"{key} may not be null")
            kwargs[key] = value
    if "local_lr" in raw:
        value = _typed("top level", raw, "local_lr", _NUM, None)
        if value is None:
            raise ConfigError("local_lr may not be null")
        kwargs["local_lr"] = float(value)
    if "max_sim_time" in raw:
        value = _typed("top level", raw, "max_sim_time", _NUM, None)
        kwargs["max_sim_time"] = float(value) if value is not None else None
    try:
        return RunConfig(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), source=str(path))


def serialize_config(config: RunConfig) -> str:
    """Canonical JSON for a config; parse_config(serialize_config(c)) == c."""
    raw = dataclasses.asdict(config)
    return json.dumps(raw, sort_keys=True, indent=2) + "\n"


def config_hash(config: RunConfig) -> str:
    """Hex sha256 of the canonical serialization."""
    return hashlib.sha256(serialize_config(config).encode()).hexdigest()
