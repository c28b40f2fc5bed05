"""Multilayer perceptron training core.

Plain-numpy MLP with ReLU hidden layers and a linear output layer; the softmax
is folded into the cross-entropy loss.  Everything is float64 internally, every
operation is a pure function of its inputs, and all randomness comes from
explicit seeds, so identical calls are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Architecture:
    """Layer widths of an MLP: (input dim, hidden dims ..., class count)."""

    layer_sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("architecture needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must all be >= 1, got {sizes}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def weight_shapes(self) -> list[tuple[int, int]]:
        """Shapes of the weight matrices, each (fan_out, fan_in)."""
        return [
            (self.layer_sizes[i + 1], self.layer_sizes[i])
            for i in range(self.num_layers)
        ]


@dataclass
class ParameterSet:
    """Per-layer weight matrices (out x in) and bias vectors of one MLP.

    An empty ParameterSet (zero layers) is permitted so that serialization of
    header-only payloads has a value to round-trip.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must have the same layer count")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1:
                raise ValueError(f"layer {i}: weights must be 2-d and biases 1-d")
            if w.shape[0] != b.shape[0]:
                raise ValueError(
                    f"layer {i}: weight rows {w.shape[0]} != bias length {b.shape[0]}"
                )
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(
                    f"layer {i}: fan-in {w.shape[1]} does not match previous fan-out"
                )

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def num_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def architecture(self) -> Architecture:
        if not self.weights:
            raise ValueError("empty parameter set has no architecture")
        sizes = (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)
        return Architecture(sizes)

    def copy(self) -> "ParameterSet":
        return ParameterSet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def same_shape(self, other: "ParameterSet") -> bool:
        return (
            len(self.weights) == len(other.weights)
            and all(a.shape == b.shape for a, b in zip(self.weights, other.weights))
            and all(a.shape == b.shape for a, b in zip(self.biases, other.biases))
        )


@dataclass
class LabeledDataset:
    """Feature matrix (n x d) with integer class labels (n,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if self.labels.ndim != 1:
            raise ValueError("labels must be a 1-d array")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"row mismatch: {self.features.shape[0]} feature rows, "
                f"{self.labels.shape[0]} labels"
            )
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx])


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters for one local training call."""

    local_epochs: int
    batch_size: int
    learning_rate: float
    rng_seed: int

    def __post_init__(self) -> None:
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValueError("learning_rate must be finite and >= 0")


def init_parameters(arch: Architecture, seed: int) -> ParameterSet:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for out_dim, in_dim in arch.weight_shapes():
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        weights.append(rng.uniform(-limit, limit, size=(out_dim, in_dim)))
        biases.append(np.zeros(out_dim))
    return ParameterSet(weights, biases)


def _forward_batch(params: ParameterSet, x: np.ndarray) -> np.ndarray:
    """Logits for a batch (n x input_dim); hidden ReLU, linear output."""
    if not params.weights:
        raise ValueError("cannot run a forward pass on an empty parameter set")
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != params.weights[0].shape[1]:
        raise ValueError(
            f"input has shape {a.shape}, expected (*, {params.weights[0].shape[1]})"
        )
    last = params.num_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = a @ w.T + b
        if i != last:
            np.maximum(a, 0.0, out=a)
    return a


def forward(params: ParameterSet, x: np.ndarray) -> np.ndarray:
    """Logits for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward expects a 1-d feature vector")
    return _forward_batch(params, x[None, :])[0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_accuracy(params: ParameterSet, data: LabeledDataset) -> tuple[float, float]:
    """Mean cross-entropy (softmax on logits) and argmax accuracy.

    Argmax ties resolve to the lowest class index.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    num_classes = params.weights[-1].shape[0] if params.weights else 0
    if len(data.labels) and data.labels.max() >= num_classes:
        raise ValueError(
            f"label {int(data.labels.max())} out of range for {num_classes} classes"
        )
    logits = _forward_batch(params, data.features)
    logp = _log_softmax(logits)
    n = len(data)
    loss = float(-logp[np.arange(n), data.labels].mean())
    acc = float((logits.argmax(axis=1) == data.labels).mean())
    return loss, acc


def gradients(params: ParameterSet, batch: LabeledDataset) -> ParameterSet:
    """Exact gradient of the mean cross-entropy over the batch (backprop)."""
    if len(batch) == 0:
        raise ValueError("cannot take gradients on an empty batch")
    num_classes = params.weights[-1].shape[0] if params.weights else 0
    if batch.labels.max() >= num_classes:
        raise ValueError(
            f"label {int(batch.labels.max())} out of range for {num_classes} classes"
        )
    x = batch.features
    n = len(batch)
    last = params.num_layers - 1

    activations = [x]
    pre = []
    a = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        pre.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        activations.append(a)

    shifted = pre[-1] - pre[-1].max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    delta = probs
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    grad_w = [np.empty(0)] * params.num_layers
    grad_b = [np.empty(0)] * params.num_layers
    for i in range(last, -1, -1):
        grad_w[i] = delta.T @ activations[i]
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i]) * (pre[i - 1] > 0.0)
    return ParameterSet(grad_w, grad_b)


def local_training(
    params: ParameterSet,
    data: LabeledDataset,
    cfg: TrainingConfig,
    mask=None,
    round_index: int = 0,
) -> ParameterSet:
    """Minibatch SGD for cfg.local_epochs epochs; returns new parameters.

    The shuffle order is derived from (cfg.rng_seed, round_index) only, so the
    call is deterministic.  When a mask is given (a SparseMask or a per-layer
    sequence of 0/1 arrays congruent to the weights), weight gradients and the
    updated weights are zeroed at masked positions after every step; biases
    always stay dense.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    mask_layers = None
    if mask is not None:
        mask_layers = [np.asarray(m) for m in getattr(mask, "layers", mask)]
        if len(mask_layers) != params.num_layers:
            raise ValueError("mask layer count does not match parameters")
        for m, w in zip(mask_layers, params.weights):
            if m.shape != w.shape:
                raise ValueError(f"mask shape {m.shape} != weight shape {w.shape}")

    rng = np.random.default_rng((int(cfg.rng_seed), int(round_index)))
    out = params.copy()
    n = len(data)
    lr = cfg.learning_rate
    for _ in range(cfg.local_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            g = gradients(out, data.subset(idx))
            for i in range(out.num_layers):
                out.weights[i] -= lr * g.weights[i]
                if mask_layers is not None:
                    out.weights[i] *= mask_layers[i]
                out.biases[i] -= lr * g.biases[i]
    return out
