"""Dense tanh network with hand-written backpropagation, Adam and early stopping.

Model file layout (little-endian)::

    8 bytes   magic  b"GPINNMLP"
    uint32    format version (1)
    uint32    L, number of layer sizes
    uint32*L  layer sizes [in, h1, ..., out]
    then for each of the L-1 affine layers:
        float64[fan_in*fan_out]  weights, row-major with shape (fan_in, fan_out)
        float64[fan_out]         biases
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, TrainingError
from .io import atomic_write_bytes
from .loss import LossTerms, LossWeights, DATA_ONLY

MODEL_MAGIC = b"GPINNMLP"
MODEL_VERSION = 1


@dataclass
class MlpModel:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]  # (fan_in, fan_out)
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        _check_dims(self.layer_dims)
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ContractError("weights/biases do not match layer_dims")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[k], self.layer_dims[k + 1]) or b.shape != (self.layer_dims[k + 1],):
                raise ContractError(f"layer {k} parameter shapes do not match layer_dims")

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __call__(self, x):
        return forward(self, x)


def _check_dims(dims: Sequence[int]) -> None:
    if len(dims) < 2 or any(int(d) < 1 for d in dims):
        raise ContractError(f"invalid layer dims {tuple(dims)}")


def check_estimator_dims(dims: Sequence[int], n_bus: int) -> None:
    """Shape rules for a state-estimator network: 2N in/out, 2-10 hidden layers of 64-4096."""
    _check_dims(dims)
    if dims[0] != 2 * n_bus or dims[-1] != 2 * n_bus:
        raise ContractError(f"estimator must map {2 * n_bus} inputs to {2 * n_bus} outputs")
    hidden = dims[1:-1]
    if not 2 <= len(hidden) <= 10 or any(not 64 <= h <= 4096 for h in hidden):
        raise ContractError(f"hidden layers {tuple(hidden)} outside 2-10 layers of 64-4096 neurons")


def glorot_init(layer_dims: Sequence[int], seed: int) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    _check_dims(layer_dims)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(tuple(layer_dims), weights, biases)


def forward(model: MlpModel, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.layer_dims[0]:
        raise ContractError(f"input width {x.shape[1]} != {model.layer_dims[0]}")
    h = x
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if k < last:
            h = np.tanh(h)
    return h


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def backward(model: MlpModel, x, loss_fn: LossFn):
    """Reverse-mode gradients of ``loss_fn(model(x))``.

    ``loss_fn`` maps outputs to ``(loss, dloss/doutputs)``. Returns the loss and a
    list of gradients aligned with ``model.params``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.layer_dims[0]:
        raise ContractError(f"input width {x.shape[1]} != {model.layer_dims[0]}")
    acts = [x]
    last = len(model.weights) - 1
    h = x
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if k < last:
            h = np.tanh(h)
        acts.append(h)
    loss, delta = loss_fn(h)
    grads: list[np.ndarray] = [None] * (2 * len(model.weights))
    for k in range(last, -1, -1):
        if k < last:
            delta = delta * (1.0 - acts[k + 1] ** 2)
        grads[2 * k] = acts[k].T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ model.weights[k].T
    return loss, grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: MlpModel) -> "AdamState":
        return cls([np.zeros_like(p) for p in model.params], [np.zeros_like(p) for p in model.params])


def adam_step(model: MlpModel, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update, applied in place. Returns ``(model, state)``."""
    params = model.params
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ContractError("gradient/state layout does not match the model")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model, state


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    loss_weights: LossWeights = DATA_ONLY

    def __post_init__(self):
        if not 1e-5 <= self.learning_rate <= 1e-1:
            raise ContractError(f"learning rate {self.learning_rate} outside [1e-5, 1e-1]")
        if not 4 <= self.batch_size <= 128:
            raise ContractError(f"batch size {self.batch_size} outside [4, 128]")
        if self.max_epochs < 1 or self.patience < 1:
            raise ContractError("max_epochs and patience must be positive")


@dataclass
class TrainReport:
    epoch_losses: list[LossTerms] = field(default_factory=list)
    epoch_val_mae: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based
    wall_time: float = 0.0
    inference_time: float = 0.0  # seconds per sample
    stopped_early: bool = False

    @property
    def best_val_mae(self) -> float:
        return self.epoch_val_mae[self.best_epoch - 1] if self.best_epoch else math.inf


class EarlyStopping:
    """Tracks the best value; signals a stop after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, value: float) -> bool:
        """Record one epoch; return True if training should stop."""
        self.epoch += 1
        if value < self.best:
            self.best = value
            self.best_epoch = self.epoch
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train(model: MlpModel, train_data, val_data, cfg: TrainConfig, loss):
    """Mini-batch Adam training with validation early stopping.

    ``train_data``/``val_data`` are ``(x, y)`` pairs in normalized space; ``loss``
    provides ``value_and_grad(outputs, targets)``. The best-epoch snapshot (lowest
    validation MAE) is returned, not the final weights.
    """
    x, y = (np.asarray(a, dtype=float) for a in train_data)
    xv, yv = (np.asarray(a, dtype=float) for a in val_data)
    if len(x) == 0 or len(xv) == 0:
        raise ContractError("training and validation data must be non-empty")
    if len(x) != len(y) or len(xv) != len(yv):
        raise ContractError("inputs and targets differ in length")
    model = model.copy()
    state = AdamState.for_model(model)
    report = TrainReport()
    stopper = EarlyStopping(cfg.patience)
    best = model.copy()
    n = len(x)
    bs = cfg.batch_size
    t0 = time.perf_counter()
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.max_epochs + 1):
            order = epoch_rng(cfg.seed, epoch).permutation(n)
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                yb = y[idx]
                _, grads = backward(model, x[idx], lambda out: loss.value_and_grad(out, yb))
                adam_step(model, grads, state, cfg.learning_rate)
            terms = loss.value(forward(model, x), y)
            val_mae = float(np.mean(np.abs(forward(model, xv) - yv)))
            report.epoch_losses.append(terms)
            report.epoch_val_mae.append(val_mae)
            finite = math.isfinite(terms.total) and math.isfinite(val_mae)
            stop = stopper.update(val_mae if finite else math.inf)
            if stopper.improved:
                best = model.copy()
            if not finite:
                report.stopped_early = True
                break
            if stop:
                report.stopped_early = epoch < cfg.max_epochs
                break
    report.wall_time = time.perf_counter() - t0
    if stopper.best_epoch == 0:
        raise TrainingError("training diverged before any finite validation score")
    report.best_epoch = stopper.best_epoch
    t1 = time.perf_counter()
    forward(best, xv)
    report.inference_time = (time.perf_counter() - t1) / len(xv)
    return best, report


def save_model(model: MlpModel, path: str | Path) -> None:
    dims = model.layer_dims
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(dims)), struct.pack(f"<{len(dims)}I", *dims)]
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_model(path: str | Path) -> MlpModel:
    raw = Path(path).read_bytes()
    if raw[:8] != MODEL_MAGIC:
        raise ContractError(f"{path} is not a model file")
    version, n = struct.unpack_from("<II", raw, 8)
    if version != MODEL_VERSION:
        raise ContractError(f"unsupported model file version {version}")
    dims = struct.unpack_from(f"<{n}I", raw, 16)
    offset = 16 + 4 * n
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(raw, dtype="<f8", count=fan_in * fan_out, offset=offset).reshape(fan_in, fan_out)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.astype(float))
        biases.append(b.astype(float))
    if offset != len(raw):
        raise ContractError(f"{path}: trailing bytes after model payload")
    return MlpModel(dims, weights, biases)
