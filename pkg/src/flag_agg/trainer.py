"""Local learning machinery: small numpy models, mini-batch gradients, datasets.

Parameters of every model live in one flat float64 vector. For the MLP the
layout is layer-major and, inside a layer, the weight matrix (``out x in``,
row-major) followed by the bias vector.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

MODEL_KINDS = ("linear", "logistic", "mlp")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SgdConfig:
    eta: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")


@dataclass
class DatasetPartition:
    features: np.ndarray
    labels: np.ndarray
    owner: int = 0
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2 or len(self.features) == 0:
            raise DatasetError("a partition needs a non-empty 2-D feature matrix")
        if len(self.labels) != len(self.features):
            raise DatasetError("features and labels differ in length")

    def __len__(self):
        return len(self.features)


@dataclass
class Model:
    kind: str
    n_inputs: int
    hidden: tuple[int, ...] = ()
    n_classes: int = 2

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        self.hidden = tuple(self.hidden)
        if self.kind != "mlp" and self.hidden:
            raise ValueError("hidden layers only apply to kind='mlp'")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.n_inputs, *self.hidden, self.n_classes]

    @property
    def dim(self) -> int:
        if self.kind != "mlp":
            return self.n_inputs
        sizes = self.layer_sizes
        return sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind != "mlp":
            return np.zeros(self.dim)
        parts = []
        sizes = self.layer_sizes
        for i, o in zip(sizes[:-1], sizes[1:]):
            parts.append(rng.normal(0.0, 1.0 / math.sqrt(i), size=o * i))
            parts.append(np.zeros(o))
        return np.concatenate(parts)

    def _layers(self, theta):
        sizes = self.layer_sizes
        pos = 0
        for i, o in zip(sizes[:-1], sizes[1:]):
            W = theta[pos:pos + o * i].reshape(o, i)
            pos += o * i
            bias = theta[pos:pos + o]
            pos += o
            yield W, bias

    def predict(self, theta, X) -> np.ndarray:
        """Regression outputs, positive-class probabilities, or class ids."""
        X = np.asarray(X, dtype=np.float64)
        if self.kind == "linear":
            return X @ theta
        if self.kind == "logistic":
            return _sigmoid(X @ theta)
        return self._forward(theta, X)[-1].argmax(axis=1)

    def accuracy(self, theta, X, y) -> float:
        if self.kind == "linear":
            raise ValueError("accuracy is undefined for regression")
        pred = self.predict(theta, X)
        if self.kind == "logistic":
            pred = (pred >= 0.5).astype(int)
        return float(np.mean(pred == np.asarray(y)))

    def _forward(self, theta, X):
        acts = [X]
        layers = list(self._layers(theta))
        for idx, (W, bias) in enumerate(layers):
            z = acts[-1] @ W.T + bias
            acts.append(np.tanh(z) if idx < len(layers) - 1 else z)
        return acts

    def sample_losses(self, theta, X, y) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.kind == "linear":
            return 0.5 * (X @ theta - y) ** 2
        if self.kind == "logistic":
            z = X @ theta
            signed = np.where(np.asarray(y) > 0, z, -z)
            return np.logaddexp(0.0, -signed)
        logits = self._forward(theta, X)[-1]
        logp = logits - _logsumexp(logits)
        return -logp[np.arange(len(X)), np.asarray(y, dtype=int)]

    def loss(self, theta, X, y, weight_decay: float = 0.0) -> float:
        value = float(self.sample_losses(theta, X, y).mean())
        return value + 0.5 * weight_decay * float(theta @ theta)

    def gradient(self, theta, X, y, weight_decay: float = 0.0) -> np.ndarray:
        """Mean gradient of the per-sample loss over the rows of ``X``."""
        X = np.asarray(X, dtype=np.float64)
        if len(X) == 0:
            raise ValueError("empty batch")
        B = len(X)
        if self.kind == "linear":
            g = X.T @ (X @ theta - y) / B
        elif self.kind == "logistic":
            g = X.T @ (_sigmoid(X @ theta) - y) / B
        else:
            g = self._backward(theta, X, np.asarray(y, dtype=int))
        return g + weight_decay * theta

    def _backward(self, theta, X, y):
        layers = list(self._layers(theta))
        acts = self._forward(theta, X)
        logits = acts[-1]
        delta = np.exp(logits - _logsumexp(logits))
        delta[np.arange(len(X)), y] -= 1.0
        delta /= len(X)
        grads = [None] * len(layers)
        for idx in reversed(range(len(layers))):
            W, _ = layers[idx]
            grads[idx] = np.concatenate([(delta.T @ acts[idx]).ravel(), delta.sum(axis=0)])
            if idx:
                delta = (delta @ W) * (1.0 - acts[idx] ** 2)
        return np.concatenate(grads)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _logsumexp(z):
    top = z.max(axis=1, keepdims=True)
    return top + np.log(np.exp(z - top).sum(axis=1, keepdims=True))


def local_gradient(model: Model, theta, partition: DatasetPartition, batch, config: SgdConfig) -> np.ndarray:
    """Mean mini-batch gradient at ``theta``, weight decay included."""
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise ValueError("empty batch")
    if batch.min() < 0 or batch.max() >= len(partition):
        raise IndexError("batch index out of range for the partition")
    g = model.gradient(theta, partition.features[batch], partition.labels[batch], config.weight_decay)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    return g


def momentum_step(velocity, g, config: SgdConfig):
    """Classical momentum: ``v' = momentum * v + g``; the direction is ``v'``."""
    v = config.momentum * np.asarray(velocity, dtype=np.float64) + g
    return v, v


class PartitionObjective:
    """A client's empirical risk over its own partition."""

    def __init__(self, model: Model, partition: DatasetPartition, config: SgdConfig):
        self.model = model
        self.partition = partition
        self.config = config

    @property
    def dim(self) -> int:
        return self.model.dim

    def sample_batch(self, rng: np.random.Generator) -> np.ndarray:
        size = min(self.config.batch_size, len(self.partition))
        return rng.choice(len(self.partition), size=size, replace=False)

    def stochastic_gradient(self, theta, rng: np.random.Generator) -> np.ndarray:
        return local_gradient(self.model, theta, self.partition, self.sample_batch(rng), self.config)

    def loss(self, theta) -> float:
        p = self.partition
        return self.model.loss(theta, p.features, p.labels, self.config.weight_decay)

    def full_gradient(self, theta) -> np.ndarray:
        p = self.partition
        return self.model.gradient(theta, p.features, p.labels, self.config.weight_decay)


class NoisyQuadratic:
    """``F(x) = 1/2 (x - x*)^T diag(h) (x - x*)`` with additive Gaussian gradient noise.

    Each per-sample gradient is the true gradient plus ``N(0, sigma^2/d I)``,
    so its variance is exactly ``sigma^2``; a batch of ``B`` has ``sigma^2/B``.
    The smoothness constant is ``max(h)``.
    """

    def __init__(self, curvature, sigma: float, batch_size: int, optimum=None):
        self.h = np.asarray(curvature, dtype=np.float64)
        self.sigma = float(sigma)
        self.batch_size = int(batch_size)
        self.optimum = np.zeros_like(self.h) if optimum is None else np.asarray(optimum, dtype=np.float64)

    @property
    def dim(self) -> int:
        return len(self.h)

    @property
    def smoothness(self) -> float:
        return float(self.h.max())

    def loss(self, theta) -> float:
        diff = theta - self.optimum
        return 0.5 * float(diff @ (self.h * diff))

    def full_gradient(self, theta) -> np.ndarray:
        return self.h * (theta - self.optimum)

    def stochastic_gradient(self, theta, rng: np.random.Generator) -> np.ndarray:
        scale = self.sigma / math.sqrt(self.dim * self.batch_size)
        return self.full_gradient(theta) + rng.normal(0.0, scale, size=self.dim)


def global_loss(objectives, theta) -> float:
    return float(np.mean([obj.loss(theta) for obj in objectives]))


def global_gradient(objectives, theta) -> np.ndarray:
    return np.mean([obj.full_gradient(theta) for obj in objectives], axis=0)


# --- datasets ---------------------------------------------------------------

SYNTHETIC_TASKS = ("regression", "binary", "multiclass")


@dataclass
class SyntheticSpec:
    task: str = "binary"
    n_clients: int = 4
    samples_per_client: int = 100
    n_features: int = 10
    n_classes: int = 2
    noise: float = 0.1
    label_noise: float = 0.0
    margin: float = 0.0
    split: str = "iid"
    bias: bool = True
    test_samples: int = 1000

    @classmethod
    def from_dict(cls, spec: dict) -> "SyntheticSpec":
        known = {k: v for k, v in spec.items() if k in cls.__dataclass_fields__}
        unknown = {k: v for k, v in spec.items() if k not in cls.__dataclass_fields__}
        if unknown:
            raise DatasetError(f"unknown synthetic dataset fields: {sorted(unknown)}")
        out = cls(**known)
        out.validate()
        return out

    def validate(self):
        if self.task not in SYNTHETIC_TASKS:
            raise DatasetError(f"task must be one of {SYNTHETIC_TASKS}, got {self.task!r}")
        if self.split not in ("iid", "label_skew"):
            raise DatasetError(f"split must be 'iid' or 'label_skew', got {self.split!r}")
        if self.n_clients < 1 or self.samples_per_client < 1 or self.n_features < 1:
            raise DatasetError("n_clients, samples_per_client and n_features must be positive")
        if self.task == "multiclass" and self.n_classes < 2:
            raise DatasetError("multiclass needs n_classes >= 2")
        if not 0 <= self.label_noise < 0.5:
            raise DatasetError("label_noise must lie in [0, 0.5)")

    @property
    def input_dim(self) -> int:
        return self.n_features + (1 if self.bias else 0)


def _draw(spec: SyntheticSpec, truth_rng, rng, count):
    if spec.task == "multiclass":
        W = truth_rng.normal(size=(spec.n_classes, spec.n_features))
    else:
        W = truth_rng.normal(size=spec.n_features)
    offset = truth_rng.normal(scale=0.5, size=W.shape[:-1]) if spec.bias else np.zeros(W.shape[:-1])
    X = np.empty((0, spec.n_features))
    scores = np.empty((0,) + W.shape[:-1])
    # Rejection keeps only points at least `margin` from the decision boundary.
    while len(X) < count:
        cand = rng.normal(size=(count, spec.n_features))
        s = cand @ W.T + offset
        if spec.margin > 0 and spec.task == "binary":
            keep = np.abs(s) >= spec.margin
            cand, s = cand[keep], s[keep]
        X = np.vstack([X, cand])
        scores = np.concatenate([scores, s])
    X, scores = X[:count], scores[:count]

    if spec.task == "regression":
        y = scores + spec.noise * rng.normal(size=count)
    elif spec.task == "binary":
        y = (scores > 0).astype(np.int64)
        flip = rng.random(count) < spec.label_noise
        y = np.where(flip, 1 - y, y)
    else:
        y = (scores + spec.noise * rng.gumbel(size=scores.shape)).argmax(axis=1)
    if spec.bias:
        X = np.hstack([X, np.ones((count, 1))])
    return X, y


def make_synthetic(spec, seed: int) -> list[DatasetPartition]:
    """Deterministic synthetic partitions, one per client, disjoint by construction."""
    if isinstance(spec, dict):
        spec = SyntheticSpec.from_dict(spec)
    spec.validate()
    truth_ss, train_ss, _ = np.random.SeedSequence(seed).spawn(3)
    truth_rng = np.random.default_rng(truth_ss)
    rng = np.random.default_rng(train_ss)
    total = spec.n_clients * spec.samples_per_client
    X, y = _draw(spec, truth_rng, rng, total)
    if spec.split == "iid":
        order = rng.permutation(total)
    else:
        order = np.argsort(y, kind="stable") if spec.task != "regression" else np.argsort(X[:, 0], kind="stable")
    return [
        DatasetPartition(X[idx], y[idx], owner=c, indices=idx)
        for c, idx in enumerate(np.array_split(order, spec.n_clients))
    ]


def synthetic_test_set(spec, seed: int) -> DatasetPartition:
    """Held-out samples from the same ground truth as :func:`make_synthetic`."""
    if isinstance(spec, dict):
        spec = SyntheticSpec.from_dict(spec)
    truth_ss, _, test_ss = np.random.SeedSequence(seed).spawn(3)
    X, y = _draw(spec, np.random.default_rng(truth_ss), np.random.default_rng(test_ss), spec.test_samples)
    return DatasetPartition(X, y, owner=-1)


def load_csv(path, schema: dict, owner: int = 0) -> DatasetPartition:
    """Read a header-first CSV; ``schema['label']`` names the label column.

    ``schema['features']`` optionally selects and orders feature columns;
    otherwise every other column is a feature. ``schema['label_type']`` is
    ``"int"`` (default) or ``"float"``.
    """
    if not os.path.exists(path):
        raise DatasetError(f"no such file: {path}")
    label = schema.get("label")
    if not label:
        raise DatasetError("schema must name the label column")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if label not in header:
        raise DatasetError(f"label column {label!r} not in header {header}")
    features = schema.get("features") or [h for h in header if h != label]
    missing = [f for f in features if f not in header]
    if missing:
        raise DatasetError(f"feature columns {missing} not in header")
    cols = [header.index(f) for f in features]
    label_col = header.index(label)
    body = rows[1:]
    if not body:
        raise DatasetError(f"{path} has a header but no data rows")

    X = np.empty((len(body), len(cols)))
    y = np.empty(len(body))
    bad = []
    for r, row in enumerate(body):
        line = r + 2
        if len(row) != len(header):
            raise DatasetError(f"row {line} has {len(row)} fields, header has {len(header)}")
        try:
            X[r] = [float(row[c]) for c in cols]
            y[r] = float(row[label_col])
        except ValueError:
            bad.append(line)
    if bad:
        raise DatasetError(f"non-numeric fields in rows {bad[:20]}")
    if schema.get("label_type", "int") == "int":
        if not np.all(y == np.round(y)):
            raise DatasetError("label column is not integral; set label_type='float'")
        y = y.astype(np.int64)
    return DatasetPartition(X, y, owner=owner)


def write_csv(path, partition: DatasetPartition, label: str = "label", feature_names=None) -> None:
    names = feature_names or [f"x{i}" for i in range(partition.features.shape[1])]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow([*names, label])
        for x, y in zip(partition.features, partition.labels):
            out.writerow([*(repr(float(v)) for v in x), repr(y.item())])
