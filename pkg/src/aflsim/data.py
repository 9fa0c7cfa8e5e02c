"""Dataset generation, IDX loading, client partitioning, and batch sampling.

Everything here is deterministic given its seed, and the returned arrays are
treated as immutable by the rest of the package.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .model import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

PARTITION_SCHEMES = ("iid", "label_shard", "dirichlet")


@dataclass
class Dataset:
    """Feature matrix (n, d), integer labels (n,), and the class count."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (n, d) with one label per row")
        if self.size < 1:
            raise ValueError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class PartitionPlan:
    """Disjoint per-client index lists covering a dataset exactly once."""

    assignments: list[np.ndarray]
    scheme: str
    params: dict = field(default_factory=dict)

    @property
    def client_count(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]


def generate_synthetic(
    class_count: int,
    dim: int,
    n_per_class: int,
    spread: float,
    seed,
) -> Dataset:
    """Gaussian blobs around unit-norm random centers, exactly balanced.

    Samples are emitted in class-block order (all of class 0, then class 1,
    ...).  With ``spread == 0`` every sample equals its class center.
    """
    if class_count < 2:
        raise ValueError("class_count must be at least 2")
    if dim < 2:
        raise ValueError("dim must be at least 2")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(class_count, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    noise = rng.normal(size=(class_count, n_per_class, dim))
    features = (centers[:, None, :] + spread * noise).reshape(class_count * n_per_class, dim)
    labels = np.repeat(np.arange(class_count), n_per_class)
    return Dataset(features, labels, class_count)


def _read_idx_header(raw: bytes, path, expected_magic: int, n_dims: int, what: str):
    header_len = 4 * (1 + n_dims)
    if len(raw) < header_len:
        raise ValueError(f"{what} file {path} is truncated: header incomplete")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expected_magic:
        raise ValueError(
            f"{what} file {path} has magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    dims = struct.unpack(f">{n_dims}i", raw[4:header_len])
    return dims, raw[header_len:]


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair (the MNIST family distribution format).

    Layout, big-endian:
      images: magic 0x00000803, int32 dims [n, rows, cols], then n*rows*cols
              uint8 pixels row-major
      labels: magic 0x00000801, int32 dims [n], then n uint8 labels

    Pixels are scaled to [0, 1]; images are flattened row-major to
    rows*cols features.  Class count is fixed at 10.
    """
    with open(images_path, "rb") as f:
        raw = f.read()
    (n_images, rows, cols), pixel_bytes = _read_idx_header(
        raw, images_path, IDX_IMAGES_MAGIC, 3, "images"
    )
    expected = n_images * rows * cols
    if len(pixel_bytes) < expected:
        raise ValueError(
            f"images file {images_path} is truncated: expected {expected} pixel "
            f"bytes, found {len(pixel_bytes)}"
        )
    pixels = np.frombuffer(pixel_bytes[:expected], dtype=np.uint8)

    with open(labels_path, "rb") as f:
        raw = f.read()
    (n_labels,), label_bytes = _read_idx_header(raw, labels_path, IDX_LABELS_MAGIC, 1, "labels")
    if len(label_bytes) < n_labels:
        raise ValueError(
            f"labels file {labels_path} is truncated: expected {n_labels} label "
            f"bytes, found {len(label_bytes)}"
        )
    if n_images != n_labels:
        raise ValueError(
            f"item count mismatch: {n_images} images in {images_path} vs "
            f"{n_labels} labels in {labels_path}"
        )
    labels = np.frombuffer(label_bytes[:n_labels], dtype=np.uint8).astype(np.int64)
    features = pixels.reshape(n_images, rows * cols).astype(np.float64) / 255.0
    return Dataset(features, labels, 10)


def partition(dataset: Dataset, n_clients: int, scheme: str, seed, **params) -> PartitionPlan:
    """Split dataset indices across clients.

    Schemes:
      iid          seeded shuffle, near-equal contiguous split.
      label_shard  sort indices by label, cut into n_clients * shards_per_client
                   equal shards, hand each client a consecutive block of
                   shards_per_client shards; which client gets which block is a
                   seeded shuffle.  Consecutive blocks keep each client's label
                   spread at shards_per_client + 1 at most (shards_per_client
                   when class sizes align with shard boundaries).
      dirichlet    per class, split its samples across clients in proportions
                   drawn from Dirichlet(alpha); empty clients are topped up
                   from the largest one.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be positive")
    if dataset.size < n_clients:
        raise ValueError(
            f"cannot partition {dataset.size} samples across {n_clients} clients"
        )
    if scheme not in PARTITION_SCHEMES:
        raise ValueError(f"unknown partition scheme {scheme!r}, expected one of {PARTITION_SCHEMES}")
    rng = np.random.default_rng(seed)

    if scheme == "iid":
        order = rng.permutation(dataset.size)
        assignments = [np.sort(chunk) for chunk in np.array_split(order, n_clients)]
        return PartitionPlan(assignments, scheme)

    if scheme == "label_shard":
        shards_per_client = int(params.get("shards_per_client", 2))
        if shards_per_client < 1:
            raise ValueError("shards_per_client must be positive")
        n_shards = n_clients * shards_per_client
        if dataset.size < n_shards:
            raise ValueError(
                f"cannot cut {dataset.size} samples into {n_shards} shards"
            )
        by_label = np.argsort(dataset.labels, kind="stable")
        shards = np.array_split(by_label, n_shards)
        block_order = rng.permutation(n_clients)
        assignments: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * n_clients
        for client, block in enumerate(block_order):
            chunk = shards[block * shards_per_client : (block + 1) * shards_per_client]
            assignments[client] = np.sort(np.concatenate(chunk))
        return PartitionPlan(assignments, scheme, {"shards_per_client": shards_per_client})

    alpha = float(params.get("alpha", 0.5))
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == c)
        if members.size == 0:
            continue
        shares = rng.dirichlet(np.full(n_clients, alpha))
        # cumulative rounding keeps the split exact
        cuts = np.floor(np.cumsum(shares) * members.size + 0.5).astype(np.int64)
        cuts[-1] = members.size
        start = 0
        for i, stop in enumerate(cuts):
            buckets[i].append(members[start:stop])
            start = stop
    assignments = [
        np.sort(np.concatenate(b)) if b else np.empty(0, dtype=np.int64) for b in buckets
    ]
    _fill_empty_clients(assignments)
    return PartitionPlan(assignments, scheme, {"alpha": alpha})


def _fill_empty_clients(assignments: list[np.ndarray]) -> None:
    """Move single samples from the largest client into any empty ones."""
    for i, a in enumerate(assignments):
        if len(a) > 0:
            continue
        donor = max(range(len(assignments)), key=lambda j: (len(assignments[j]), -j))
        if len(assignments[donor]) <= 1:
            raise ValueError("not enough samples to give every client at least one")
        assignments[i] = assignments[donor][-1:]
        assignments[donor] = assignments[donor][:-1]


def sample_batch(
    plan: PartitionPlan,
    client: int,
    dataset: Dataset,
    batch_size: int,
    rng: np.random.Generator,
) -> Batch:
    """Draw batch_size samples uniformly with replacement from one client's partition.

    Advances ``rng`` deterministically; batch_size may exceed the partition
    size.
    """
    indices = plan.assignments[client]
    if len(indices) == 0:
        raise ValueError(f"client {client} has an empty partition")
    picks = indices[rng.integers(0, len(indices), size=batch_size)]
    return Batch(dataset.features[picks], dataset.labels[picks])
