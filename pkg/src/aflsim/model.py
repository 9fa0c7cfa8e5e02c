"""Flat-vector MLP classifier with manual gradients and local SGD training.

The model state is a single 1-D float64 numpy array holding every weight
matrix and bias in layer order.  Hidden layers use a rectifier, the output is
a softmax over class logits, and the loss is cross-entropy.  All operations
are pure functions of their inputs, so they are safe to share across threads.

Conventions that the rest of the package relies on:

* ``batch_loss_sum`` returns the SUM of per-sample losses; divide by the
  batch size for the mean loss.
* ``gradient`` differentiates the MEAN per-sample loss, so its scale does not
  depend on the batch size.
* ``local_train`` returns ``delta = base - final``; the server subtracts
  deltas from the global model to move downhill.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FloatArray = np.ndarray


@dataclass(frozen=True)
class ModelArch:
    """Feed-forward layer sizes: (input dim, hidden dims ..., class count).

    Hidden activation is a rectifier and the output is a softmax; both are
    fixed, only the layer widths vary.
    """

    layer_dims: tuple[int, ...]

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ValueError("layer_dims needs at least an input and an output entry")
        if any(d <= 0 for d in self.layer_dims):
            raise ValueError(f"layer_dims must be positive, got {self.layer_dims}")
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def class_count(self) -> int:
        return self.layer_dims[-1]

    @property
    def param_count(self) -> int:
        """Total parameters: sum of d_k * d_{k+1} weights plus d_{k+1} biases."""
        dims = self.layer_dims
        return sum(dims[k] * dims[k + 1] + dims[k + 1] for k in range(len(dims) - 1))


@dataclass
class Batch:
    """A mini-batch: feature matrix (n, input_dim) and integer class labels (n,)."""

    features: FloatArray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"row count mismatch: {self.features.shape[0]} feature rows vs "
                f"{self.labels.shape[0]} labels"
            )
        if self.labels.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")

    @property
    def size(self) -> int:
        return self.labels.shape[0]


def init_params(arch: ModelArch, seed: int) -> FloatArray:
    """Deterministically initialise a flat parameter vector.

    Weights are drawn from a zero-mean normal scaled by 1/sqrt(fan_in);
    biases start at zero.  Identical (arch, seed) pairs give identical
    vectors.
    """
    rng = np.random.default_rng(seed)
    chunks = []
    dims = arch.layer_dims
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        chunks.append(w.ravel())
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def _check_dims(params: FloatArray, arch: ModelArch) -> None:
    if params.ndim != 1 or params.size != arch.param_count:
        raise ValueError(
            f"parameter vector of size {params.size} does not match arch "
            f"{arch.layer_dims} (expected {arch.param_count})"
        )


def _unpack(params: FloatArray, arch: ModelArch) -> list[tuple[FloatArray, FloatArray]]:
    """Split the flat vector into (weight matrix, bias) views per layer."""
    layers = []
    offset = 0
    dims = arch.layer_dims
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        w = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def _forward(params: FloatArray, arch: ModelArch, features: FloatArray):
    """Return (pre-activations per layer, post-activations per layer, logits)."""
    layers = _unpack(params, arch)
    activations = [features]
    pre = []
    h = features
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        pre.append(z)
        if i < len(layers) - 1:
            h = np.maximum(z, 0.0)
            activations.append(h)
    return pre, activations, pre[-1]


def _log_softmax_terms(logits: FloatArray):
    """Stabilised log-sum-exp per row, returned with the shifted exponentials."""
    shift = logits.max(axis=1, keepdims=True)
    exp_shifted = np.exp(logits - shift)
    lse = shift[:, 0] + np.log(exp_shifted.sum(axis=1))
    return lse, exp_shifted


def batch_loss_sum(params: FloatArray, arch: ModelArch, batch: Batch) -> float:
    """Sum of per-sample softmax cross-entropy losses over the batch.

    Args:
        params: flat parameter vector matching ``arch``.
        arch: layer layout.
        batch: samples to score.

    Returns:
        Non-negative total loss, log-sum-exp stabilised.
    """
    _check_dims(params, arch)
    if batch.features.shape[1] != arch.input_dim:
        raise ValueError(
            f"batch feature dim {batch.features.shape[1]} does not match "
            f"arch input dim {arch.input_dim}"
        )
    _, _, logits = _forward(params, arch, batch.features)
    lse, _ = _log_softmax_terms(logits)
    true_logits = logits[np.arange(batch.size), batch.labels]
    return float(np.sum(lse - true_logits))


def gradient(params: FloatArray, arch: ModelArch, batch: Batch) -> FloatArray:
    """Gradient of the mean per-sample loss with respect to the flat vector.

    Backpropagates through the rectifier layers by hand; the returned vector
    has the same length and layout as ``params``.
    """
    _check_dims(params, arch)
    if batch.features.shape[1] != arch.input_dim:
        raise ValueError(
            f"batch feature dim {batch.features.shape[1]} does not match "
            f"arch input dim {arch.input_dim}"
        )
    pre, activations, logits = _forward(params, arch, batch.features)
    lse, exp_shifted = _log_softmax_terms(logits)
    probs = exp_shifted / exp_shifted.sum(axis=1, keepdims=True)

    n = batch.size
    dz = probs.copy()
    dz[np.arange(n), batch.labels] -= 1.0
    dz /= n

    layers = _unpack(params, arch)
    grads: list[FloatArray | None] = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        h_in = activations[i]
        dw = h_in.T @ dz
        db = dz.sum(axis=0)
        grads[i] = (dw, db)
        if i > 0:
            dh = dz @ layers[i][0].T
            dz = dh * (pre[i - 1] > 0.0)

    out = np.empty_like(params)
    offset = 0
    for dw, db in grads:
        out[offset : offset + dw.size] = dw.ravel()
        offset += dw.size
        out[offset : offset + db.size] = db
        offset += db.size
    return out


def local_train(
    base: FloatArray,
    arch: ModelArch,
    features: FloatArray,
    labels: np.ndarray,
    steps: int,
    lr: float,
    batch_size: int,
    rng_seed,
) -> tuple[FloatArray, FloatArray]:
    """Run ``steps`` SGD steps from ``base`` on one client's data.

    Each step draws ``batch_size`` samples uniformly with replacement from
    the client partition using a generator seeded with ``rng_seed``, then
    applies x <- x - lr * gradient(x, batch).  The cumulative update is
    accumulated separately and the final point is defined as
    ``base - delta``, so the identity ``base - delta == final`` holds
    bitwise.

    Args:
        base: starting parameter vector.
        arch: layer layout.
        features: client partition feature matrix.
        labels: client partition labels.
        steps: number of local SGD steps (M); may be zero.
        lr: local learning rate.
        batch_size: samples per step.
        rng_seed: seed material for ``numpy.random.default_rng``.

    Returns:
        (delta, final) where delta = base - final.
    """
    _check_dims(base, arch)
    n = int(np.asarray(labels).shape[0])
    if n < 1:
        raise ValueError("client partition is empty")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if lr <= 0:
        raise ValueError("lr must be positive")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")

    rng = np.random.default_rng(rng_seed)
    delta = np.zeros_like(base)
    current = base - delta
    for _ in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        batch = Batch(features[idx], np.asarray(labels)[idx])
        delta = delta + lr * gradient(current, arch, batch)
        current = base - delta
    return delta, current


def evaluate(params: FloatArray, arch: ModelArch, features: FloatArray, labels: np.ndarray) -> tuple[float, float]:
    """Accuracy and mean loss over a full dataset.

    Ties in the argmax resolve to the lowest class index.  Deterministic:
    no sampling is involved.
    """
    labels = np.asarray(labels)
    if labels.shape[0] < 1:
        raise ValueError("dataset is empty")
    batch = Batch(features, labels)
    _, _, logits = _forward(params, arch, batch.features)
    predictions = np.argmax(logits, axis=1)
    accuracy = float(np.mean(predictions == batch.labels))
    mean_loss = batch_loss_sum(params, arch, batch) / batch.size
    return accuracy, mean_loss
