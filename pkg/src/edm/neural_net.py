"""Feed-forward logistic network trained by per-record backpropagation.

Each unit computes ``logistic(w . x + b)``. The bias plays the role of a
negated firing threshold: a hard threshold unit fires when ``w . x > T``,
which is the sign of the pre-activation with ``b = -T``. The output is a
single unit regressing the class index scaled to [0, 1].

The gradient is implemented twice: ``backprop_gradient`` in plain numpy
(used by the finite-difference checks) and a compiled epoch kernel used by
``train``. Tests pin the two to each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numba
import numpy as np
from numba.typed import List as TypedList

from .errors import DataError, TrainingDivergedError
from .example_gen import Dataset, LabeledRecord
from .rule_model import Record, _value

FORMAT_VERSION = "edm-network 1"


@dataclass(frozen=True)
class NormalizationParams:
    variables: tuple[str, ...]
    mins: tuple[float, ...]
    maxs: tuple[float, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "mins", tuple(float(x) for x in self.mins))
        object.__setattr__(self, "maxs", tuple(float(x) for x in self.maxs))

    def apply(self, record: Record) -> np.ndarray:
        x = np.array([_value(record, v) for v in self.variables], dtype=float)
        return self.scale_matrix(x[None, :])[0]

    def scale_matrix(self, X: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.mins)
        hi = np.asarray(self.maxs)
        return np.clip((X - lo) / (hi - lo), 0.0, 1.0)

    def target(self, label: int) -> float:
        if self.num_classes == 1:
            return 0.0
        return (label - 1) / (self.num_classes - 1)


def normalize_fit(train: Dataset, variables: Sequence[str] | None = None) -> NormalizationParams:
    """Per-variable min/max over the training records."""
    if not len(train):
        raise DataError("cannot fit normalization on an empty dataset")
    names = tuple(train.variables if variables is None else variables)
    X = train.matrix(names)
    mins, maxs = X.min(axis=0), X.max(axis=0)
    constant = [n for n, lo, hi in zip(names, mins, maxs) if not hi > lo]
    if constant:
        raise DataError(f"constant training variable(s): {', '.join(constant)}")
    return NormalizationParams(names, tuple(map(float, mins)), tuple(map(float, maxs)), train.ladder.num_classes)


def normalize_apply(params: NormalizationParams, record: Record) -> np.ndarray:
    return params.apply(record)


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class Network:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    norm: NormalizationParams

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2 or self.layer_sizes[-1] != 1:
            raise DataError("network needs an input layer and exactly one output unit")
        if len(self.norm.variables) != self.layer_sizes[0]:
            raise DataError("normalization does not match the input width")
        ws, bs = [], []
        for i, (n_in, n_out) in enumerate(zip(self.layer_sizes, self.layer_sizes[1:])):
            w = np.array(self.weights[i], dtype=float)
            b = np.array(self.biases[i], dtype=float)
            if w.shape != (n_out, n_in) or b.shape != (n_out,):
                raise DataError(f"layer {i} has shape {w.shape}/{b.shape}, expected {(n_out, n_in)}/{(n_out,)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DataError(f"layer {i} has non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        self.weights, self.biases = ws, bs

    @property
    def variables(self) -> tuple[str, ...]:
        return self.norm.variables

    def forward_scaled(self, x: np.ndarray) -> float:
        a = np.asarray(x, dtype=float)
        for w, b in zip(self.weights, self.biases):
            a = _logistic(w @ a + b)
        return float(a[0])

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        """Outputs for raw (unnormalized) rows ordered as ``self.variables``."""
        a = self.norm.scale_matrix(X).T
        for w, b in zip(self.weights, self.biases):
            a = _logistic(w @ a + b[:, None])
        return a[0]


def init_network(layer_sizes: Sequence[int], norm: NormalizationParams, init_scale: float, rng: np.random.Generator) -> Network:
    ws, bs = [], []
    for n_in, n_out in zip(layer_sizes, layer_sizes[1:]):
        ws.append(rng.uniform(-init_scale, init_scale, size=(n_out, n_in)))
        bs.append(rng.uniform(-init_scale, init_scale, size=n_out))
    return Network(tuple(layer_sizes), ws, bs, norm)


def fires(weights: Sequence[float], threshold: float, inputs: Sequence[float]) -> bool:
    """Hard threshold unit: true iff the weighted input sum exceeds ``threshold``."""
    return float(np.dot(weights, inputs)) > threshold


def forward(net: Network, record: Record) -> float:
    return net.forward_scaled(net.norm.apply(record))


def _dataset_arrays(net: Network, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    X = net.norm.scale_matrix(data.matrix(net.variables))
    y = np.array([net.norm.target(r.label) for r in data.records], dtype=float)
    return X, y


def loss_mse(net: Network, dataset: Dataset) -> float:
    if not len(dataset):
        raise DataError("MSE of an empty dataset is undefined")
    total = 0.0
    for rec in dataset.records:
        total += (forward(net, rec.values) - net.norm.target(rec.label)) ** 2
    return total / len(dataset)


@dataclass
class Gradient:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])


def backprop_gradient(net: Network, record: LabeledRecord) -> Gradient:
    """Gradient of ``(output - target)**2`` for one record, by reverse-mode chain rule."""
    x = net.norm.apply(record.values)
    acts = [x]
    for w, b in zip(net.weights, net.biases):
        acts.append(_logistic(w @ acts[-1] + b))
    out = acts[-1]
    delta = 2.0 * (out - net.norm.target(record.label)) * out * (1.0 - out)
    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    for i in reversed(range(len(net.weights))):
        gw[i] = np.outer(delta, acts[i])
        gb[i] = delta.copy()
        if i:
            a = acts[i]
            delta = (net.weights[i].T @ delta) * a * (1.0 - a)
    return Gradient(gw, gb)


# -- compiled training kernels ------------------------------------------------


@numba.njit(cache=True)
def _sgd_epoch(ws, bs, acts, deltas, X, y, order, lr):
    L = len(ws)
    for r in order:
        a0 = acts[0]
        for j in range(a0.shape[0]):
            a0[j] = X[r, j]
        for l in range(L):
            w = ws[l]
            b = bs[l]
            src = acts[l]
            dst = acts[l + 1]
            for u in range(w.shape[0]):
                z = b[u]
                for j in range(w.shape[1]):
                    z += w[u, j] * src[j]
                dst[u] = 1.0 / (1.0 + np.exp(-z))
        o = acts[L][0]
        deltas[L - 1][0] = 2.0 * (o - y[r]) * o * (1.0 - o)
        for l in range(L - 1, 0, -1):
            w = ws[l]
            a = acts[l]
            d_out = deltas[l]
            d_in = deltas[l - 1]
            for j in range(w.shape[1]):
                s = 0.0
                for u in range(w.shape[0]):
                    s += w[u, j] * d_out[u]
                d_in[j] = s * a[j] * (1.0 - a[j])
        for l in range(L):
            w = ws[l]
            b = bs[l]
            src = acts[l]
            d = deltas[l]
            for u in range(w.shape[0]):
                g = lr * d[u]
                for j in range(w.shape[1]):
                    w[u, j] -= g * src[j]
                b[u] -= g


@numba.njit(cache=True)
def _mse(ws, bs, acts, X, y):
    L = len(ws)
    total = 0.0
    for r in range(X.shape[0]):
        a0 = acts[0]
        for j in range(a0.shape[0]):
            a0[j] = X[r, j]
        for l in range(L):
            w = ws[l]
            b = bs[l]
            src = acts[l]
            dst = acts[l + 1]
            for u in range(w.shape[0]):
                z = b[u]
                for j in range(w.shape[1]):
                    z += w[u, j] * src[j]
                dst[u] = 1.0 / (1.0 + np.exp(-z))
        e = acts[L][0] - y[r]
        total += e * e
    return total / X.shape[0]


class _Workspace:
    """Mutable parameter copies and scratch buffers for the compiled kernels."""

    def __init__(self, net: Network):
        self.ws = TypedList([np.array(w, dtype=float) for w in net.weights])
        self.bs = TypedList([np.array(b, dtype=float) for b in net.biases])
        self.acts = TypedList([np.zeros(n) for n in net.layer_sizes])
        self.deltas = TypedList([np.zeros(n) for n in net.layer_sizes[1:]])

    def snapshot(self, net: Network) -> Network:
        return Network(net.layer_sizes, [w.copy() for w in self.ws], [b.copy() for b in self.bs], net.norm)

    def sgd_epoch(self, X, y, order, lr):
        _sgd_epoch(self.ws, self.bs, self.acts, self.deltas, X, y, order, lr)

    def mse(self, X, y) -> float:
        return float(_mse(self.ws, self.bs, self.acts, X, y))


def sgd_step(net: Network, record: LabeledRecord, learning_rate: float) -> Network:
    """One compiled per-record update; returns the updated copy."""
    X = net.norm.apply(record.values)[None, :]
    y = np.array([net.norm.target(record.label)])
    work = _Workspace(net)
    work.sgd_epoch(X, y, np.zeros(1, dtype=np.int64), learning_rate)
    return work.snapshot(net)


# -- training -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    max_epochs: int = 2000
    patience: int = 100
    hidden_layers: tuple[int, ...] = (8,)
    init_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if not self.learning_rate > 0 or not math.isfinite(self.learning_rate):
            raise DataError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise DataError("max_epochs must be positive")
        if self.patience < 0:
            raise DataError("patience must be non-negative")
        if any(h < 1 for h in self.hidden_layers):
            raise DataError("hidden layer sizes must be positive")
        if not self.init_scale > 0:
            raise DataError("init_scale must be positive")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


@dataclass
class TrainReport:
    network: Network
    train_mse_history: list[float]
    test_mse_history: list[float]
    best_epoch: int
    train_mse: float
    test_mse: float

    @property
    def stopped_epoch(self) -> int:
        return len(self.test_mse_history)

    def history_csv(self) -> str:
        return mse_history_csv(self.train_mse_history, self.test_mse_history)


def train(train_set: Dataset, test_set: Dataset, cfg: TrainConfig = TrainConfig(),
          variables: Sequence[str] | None = None) -> TrainReport:
    """Stochastic gradient descent with test-set early stopping.

    Epochs are numbered from 1. Training stops once ``max(patience, 1)``
    consecutive epochs fail to lower the best test MSE, or at ``max_epochs``;
    the network returned is the snapshot from the best test epoch.
    """
    if not len(train_set) or not len(test_set):
        raise DataError("training and test sets must be nonempty")
    for ds in (train_set, test_set):
        if ds.origin == "blind":
            raise DataError("blind records must not be used for training or model selection")
    if train_set.variables != test_set.variables:
        raise DataError("training and test sets use different variables")
    norm = normalize_fit(train_set, variables)
    rng = np.random.default_rng(cfg.seed)
    sizes = (len(norm.variables), *cfg.hidden_layers, 1)
    net = init_network(sizes, norm, cfg.init_scale, rng)
    Xtr, ytr = _dataset_arrays(net, train_set)
    Xte, yte = _dataset_arrays(net, test_set)

    work = _Workspace(net)
    train_hist, test_hist = [], []
    best_net, best_epoch, best_test = net, 0, math.inf
    since = 0
    for epoch in range(1, cfg.max_epochs + 1):
        work.sgd_epoch(Xtr, ytr, rng.permutation(len(ytr)).astype(np.int64), cfg.learning_rate)
        tr, te = work.mse(Xtr, ytr), work.mse(Xte, yte)
        if not math.isfinite(tr):
            raise TrainingDivergedError(epoch, "train")
        if not math.isfinite(te):
            raise TrainingDivergedError(epoch, "test")
        train_hist.append(tr)
        test_hist.append(te)
        if te < best_test:
            best_test, best_epoch, since = te, epoch, 0
            best_net = work.snapshot(net)
        else:
            since += 1
            if since >= max(cfg.patience, 1):
                break
    return TrainReport(best_net, train_hist, test_hist, best_epoch, train_hist[best_epoch - 1], best_test)


def mse_history_csv(train_hist: Sequence[float], test_hist: Sequence[float]) -> str:
    lines = ["epoch,train_mse,test_mse"]
    lines += [f"{i},{tr!r},{te!r}" for i, (tr, te) in enumerate(zip(train_hist, test_hist), start=1)]
    return "\n".join(lines) + "\n"


# -- serialization ------------------------------------------------------------


def serialize_network(net: Network) -> str:
    """Versioned text form; floats use shortest round-trip ``repr``."""
    lines = [FORMAT_VERSION, "layers: " + ",".join(map(str, net.layer_sizes)), f"classes: {net.norm.num_classes}"]
    for name, lo, hi in zip(net.norm.variables, net.norm.mins, net.norm.maxs):
        lines.append(f"norm: {name},{lo!r},{hi!r}")
    for li, (w, b) in enumerate(zip(net.weights, net.biases), start=1):
        for u in range(w.shape[0]):
            lines.append(f"unit {li}: " + ",".join(repr(float(v)) for v in w[u]) + f",{float(b[u])!r}")
    return "\n".join(lines) + "\n"


def parse_network(text: str) -> Network:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != FORMAT_VERSION:
        raise DataError(f"not a network file (expected header {FORMAT_VERSION!r})")
    try:
        sizes = tuple(int(x) for x in _field(lines[1], "layers").split(","))
        num_classes = int(_field(lines[2], "classes"))
        names, mins, maxs = [], [], []
        pos = 3
        for _ in range(sizes[0]):
            name, lo, hi = _field(lines[pos], "norm").split(",")
            names.append(name)
            mins.append(float(lo))
            maxs.append(float(hi))
            pos += 1
        ws, bs = [], []
        for li, (n_in, n_out) in enumerate(zip(sizes, sizes[1:]), start=1):
            rows = []
            for _ in range(n_out):
                vals = [float(v) for v in _field(lines[pos], f"unit {li}").split(",")]
                if len(vals) != n_in + 1:
                    raise DataError(f"unit line {pos + 1}: expected {n_in + 1} numbers")
                rows.append(vals)
                pos += 1
            arr = np.array(rows, dtype=float)
            ws.append(arr[:, :-1])
            bs.append(arr[:, -1])
    except (IndexError, ValueError) as exc:
        raise DataError(f"malformed network file: {exc}") from None
    if pos != len(lines):
        raise DataError("trailing lines in network file")
    norm = NormalizationParams(tuple(names), tuple(mins), tuple(maxs), num_classes)
    return Network(sizes, ws, bs, norm)


def _field(line: str, key: str) -> str:
    prefix = key + ":"
    if not line.startswith(prefix):
        raise DataError(f"expected {prefix!r} line, found {line[:30]!r}")
    return line[len(prefix):].strip()
