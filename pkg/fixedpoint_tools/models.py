"""Tiny classifiers trained from scratch on synthetic or CSV datasets.

Two architectures are supported:

* ``linear``: logits = x W + b
* ``mlp1``:   logits = max(0, x W1 + b1) W2 + b2

The hidden layer of ``mlp1`` is the tap point used for activation patching.
"""
import csv
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import BadSpec, DatasetError, DimensionMismatch, Diverged, NonFinite

ARCHITECTURES = ["linear", "mlp1"]
SYNTHETIC_KINDS = ["blobs", "grid_patterns"]


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    feature_names: Optional[Tuple[str, ...]] = None

    @property
    def dim(self):
        return self.inputs.shape[1]

    def __len__(self):
        return self.inputs.shape[0]


@dataclass(frozen=True)
class Classifier:
    architecture: str
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    dim: int
    n_classes: int

    @property
    def has_hidden_tap(self):
        return self.architecture == "mlp1"

    @property
    def hidden_width(self):
        if not self.has_hidden_tap:
            return None
        return self.weights[0].shape[1]


@dataclass(frozen=True)
class Prediction:
    label: int
    distribution: np.ndarray
    logits: np.ndarray

    def top(self, k):
        # stable sort keeps the lowest index first among ties
        order = np.argsort(-self.distribution, kind="stable")
        return [int(i) for i in order[:k]]


def make_dataset(inputs, labels, n_classes=None, feature_names=None):
    inputs = np.array(inputs, dtype=np.float64)
    labels = np.array(labels, dtype=np.int64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("a dataset needs a non-empty 2-D input array")
    if labels.shape != (inputs.shape[0],):
        raise ValueError("one label per input is required")
    if not np.all(np.isfinite(inputs)):
        raise NonFinite("dataset inputs must be finite")
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    if feature_names is not None:
        feature_names = tuple(feature_names)
        if len(feature_names) != inputs.shape[1]:
            raise ValueError("one feature name per input column is required")
    return Dataset(inputs, labels, int(n_classes), feature_names)


def make_classifier(architecture, weights, biases):
    """Build a classifier from explicit parameters, checking their shapes."""
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture '{architecture}'")
    weights = tuple(np.array(w, dtype=np.float64) for w in weights)
    biases = tuple(np.array(b, dtype=np.float64) for b in biases)
    n_layers = 1 if architecture == "linear" else 2
    if len(weights) != n_layers or len(biases) != n_layers:
        raise ValueError(f"{architecture} needs {n_layers} weight matrices and biases")
    for w, b in zip(weights, biases):
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ValueError(f"inconsistent layer shapes {w.shape} / {b.shape}")
    for w_in, w_out in zip(weights[:-1], weights[1:]):
        if w_in.shape[1] != w_out.shape[0]:
            raise ValueError("consecutive layers do not chain")
    if not all(np.all(np.isfinite(p)) for p in weights + biases):
        raise NonFinite("classifier parameters must be finite")
    return Classifier(
        architecture, weights, biases, weights[0].shape[0], weights[-1].shape[1]
    )


def generate_synthetic(spec):
    """Generate a seeded synthetic dataset.

    ``blobs`` draws Gaussian clusters around seeded centers. ``grid_patterns``
    draws one binary template per class on a w x w grid (dim = w * w) and adds
    Gaussian noise, so features are spatially meaningful for masking.
    """
    kind = spec["kind"]
    classes = int(spec["classes"])
    dim = int(spec["dim"])
    per_class = int(spec["per_class"])
    noise = float(spec["noise"])
    rng = np.random.default_rng(spec.get("seed", 0))

    if min(classes, dim, per_class) < 1:
        raise BadSpec("classes, dim and per_class must be >= 1")
    if noise < 0:
        raise BadSpec("noise must be >= 0")

    if kind == "blobs":
        centers = rng.normal(scale=3.0, size=(classes, dim))
    elif kind == "grid_patterns":
        width = math.isqrt(dim)
        if width * width != dim:
            raise BadSpec(f"grid_patterns needs a square dim, got {dim}")
        centers = (rng.random((classes, dim)) < 0.35).astype(np.float64)
    else:
        raise BadSpec(f"unknown synthetic kind '{kind}'")

    labels = np.repeat(np.arange(classes), per_class)
    inputs = centers[labels] + noise * rng.standard_normal((labels.size, dim))
    return make_dataset(inputs, labels, n_classes=classes)


def _forward(model, inputs):
    if model.architecture == "linear":
        w, = model.weights
        b, = model.biases
        return None, None, inputs @ w + b
    w1, w2 = model.weights
    b1, b2 = model.biases
    pre = inputs @ w1 + b1
    hidden = np.maximum(pre, 0.0)
    return pre, hidden, hidden @ w2 + b2


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise DimensionMismatch(f"input has dim {x.shape[-1]}, model expects {model.dim}")
    if not np.all(np.isfinite(x)):
        raise NonFinite("input has non-finite entries")
    return x


def prediction_from_logits(logits):
    distribution = softmax(logits)
    return Prediction(int(np.argmax(distribution)), distribution, logits)


def predict(model, x):
    x = _check_input(model, x)
    if x.ndim != 1:
        raise DimensionMismatch("predict takes a single input vector")
    _, _, logits = _forward(model, x)
    return prediction_from_logits(logits)


def predict_proba(model, inputs):
    """Class distributions for a batch of inputs, shape (n, b)."""
    inputs = _check_input(model, np.atleast_2d(inputs))
    _, _, logits = _forward(model, inputs)
    return softmax(logits)


def hidden_activation(model, x):
    x = _check_input(model, x)
    _, hidden, _ = _forward(model, x)
    return hidden


def logits_from_hidden(model, hidden):
    w2 = model.weights[1]
    b2 = model.biases[1]
    return hidden @ w2 + b2


def input_gradient(model, x, target):
    """d log p_target / dx by manual backprop."""
    x = _check_input(model, x)
    if not 0 <= target < model.n_classes:
        raise ValueError(f"target {target} outside [0, {model.n_classes})")
    pre, _, logits = _forward(model, x)
    upstream = -softmax(logits)
    upstream[target] += 1.0

    if model.architecture == "linear":
        return model.weights[0] @ upstream
    w1, w2 = model.weights
    grad_hidden = w2 @ upstream
    grad_pre = grad_hidden * (pre > 0.0)
    return w1 @ grad_pre


def _init_params(architecture, dim, n_classes, hidden, rng):
    if architecture == "linear":
        return [rng.normal(scale=0.01, size=(dim, n_classes))], [np.zeros(n_classes)]
    return (
        [
            rng.normal(scale=math.sqrt(2.0 / dim), size=(dim, hidden)),
            rng.normal(scale=math.sqrt(1.0 / hidden), size=(hidden, n_classes)),
        ],
        [np.full(hidden, 0.01), np.zeros(n_classes)],
    )


def _cross_entropy(probs, labels):
    picked = probs[np.arange(labels.size), labels]
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(picked)))


def train(dataset, config):
    """Mini-batch gradient descent on cross-entropy.

    `config` keys: architecture, hidden, epochs, lr, seed and optionally
    batch_size (default 32).
    """
    architecture = config["architecture"]
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture '{architecture}'")
    lr = float(config["lr"])
    if lr <= 0:
        raise ValueError("lr must be > 0")
    epochs = int(config["epochs"])
    batch_size = int(config.get("batch_size", 32))
    hidden = int(config.get("hidden", 16))
    rng = np.random.default_rng(config.get("seed", 0))

    inputs, labels = dataset.inputs, dataset.labels
    n, b = len(dataset), dataset.n_classes
    weights, biases = _init_params(architecture, dataset.dim, b, hidden, rng)
    onehot = np.eye(b)[labels]

    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                xb, yb = inputs[idx], onehot[idx]
                if architecture == "linear":
                    logits = xb @ weights[0] + biases[0]
                    dlogits = (softmax(logits) - yb) / idx.size
                    weights[0] -= lr * (xb.T @ dlogits)
                    biases[0] -= lr * dlogits.sum(axis=0)
                else:
                    pre = xb @ weights[0] + biases[0]
                    h = np.maximum(pre, 0.0)
                    logits = h @ weights[1] + biases[1]
                    dlogits = (softmax(logits) - yb) / idx.size
                    dh = (dlogits @ weights[1].T) * (pre > 0.0)
                    weights[1] -= lr * (h.T @ dlogits)
                    biases[1] -= lr * dlogits.sum(axis=0)
                    weights[0] -= lr * (xb.T @ dh)
                    biases[0] -= lr * dh.sum(axis=0)

            model = Classifier(
                architecture, tuple(w.copy() for w in weights),
                tuple(bb.copy() for bb in biases), dataset.dim, b,
            )
            params_ok = all(np.all(np.isfinite(p)) for p in weights + biases)
            loss = _cross_entropy(predict_proba(model, inputs), labels) if params_ok \
                else float("nan")
            if not math.isfinite(loss):
                raise Diverged(f"loss became non-finite at epoch {epoch}")

    if epochs < 1:
        model = Classifier(architecture, tuple(weights), tuple(biases), dataset.dim, b)
    return model


def accuracy(model, dataset):
    probs = predict_proba(model, dataset.inputs)
    return float(np.mean(np.argmax(probs, axis=1) == dataset.labels))


def write_dataset(path, dataset):
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow([f"f{i}" for i in range(dataset.dim)] + ["label"])
        for x, y in zip(dataset.inputs, dataset.labels):
            writer.writerow([format(float(v), ".17g") for v in x] + [int(y)])


def read_dataset(path, n_classes=None):
    """Read a dataset CSV with header f0,...,f{d-1},label.

    Raises DatasetError naming the first bad line (1-based, header is line 1).
    """
    with open(path, "r", newline="") as fp:
        rows = list(csv.reader(fp))
    if not rows:
        raise DatasetError(1, "missing header")
    header = rows[0]
    dim = len(header) - 1
    if dim < 1 or header[-1] != "label":
        raise DatasetError(1, "header must be f0,...,f{d-1},label")
    if header[:-1] != [f"f{i}" for i in range(dim)]:
        raise DatasetError(1, "feature columns must be named f0,...,f{d-1}")

    inputs, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim + 1:
            raise DatasetError(lineno, f"expected {dim + 1} fields, got {len(row)}")
        try:
            values = [float(v) for v in row[:-1]]
            label = int(row[-1])
        except ValueError as e:
            raise DatasetError(lineno, str(e))
        if not all(math.isfinite(v) for v in values):
            raise DatasetError(lineno, "non-finite feature value")
        if label < 0 or (n_classes is not None and label >= n_classes):
            raise DatasetError(lineno, f"label {label} out of range")
        inputs.append(values)
        labels.append(label)
    if not inputs:
        raise DatasetError(len(rows) + 1, "no samples")
    return make_dataset(inputs, labels, n_classes=n_classes)
