"""Deterministic mini-batch training of dense softmax classifiers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .netcore import (
    PROB_CLAMP,
    DropoutConfig,
    NetworkSpec,
    NumericError,
    ShapeError,
    assemble_gradient,
    backprop,
    check_params,
    forward,
    forward_trace,
    pass_generator,
)
from .scenarios import Dataset

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "sgd_momentum", "adam")

# sub-streams of the training seed
_INIT_STREAM, _SHUFFLE_STREAM, _DROPOUT_STREAM = 0, 1, 2


class TrainingDivergedError(NumericError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    dropout: DropoutConfig | None = None
    balance_classes: bool = False
    snapshot_every_epoch: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")


@dataclass(frozen=True)
class EnsembleConfig:
    member_count: int = 5
    base_seed: int = 0

    def __post_init__(self):
        if self.member_count < 1:
            raise ValueError("member_count must be >= 1")


@dataclass
class TrainResult:
    params: np.ndarray
    snapshots: list[np.ndarray] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)


def init_params(spec: NetworkSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = pass_generator(seed, _INIT_STREAM)
    parts = []
    for layer in spec.layers:
        limit = np.sqrt(6.0 / (layer.in_width + layer.out_width))
        parts.append(rng.uniform(-limit, limit, layer.in_width * layer.out_width))
        parts.append(np.zeros(layer.out_width))
    return np.concatenate(parts)


class _Optimizer:
    def __init__(self, kind: str, lr: float, size: int):
        self.kind = kind
        self.lr = lr
        self.t = 0
        self.m = np.zeros(size)
        self.s = np.zeros(size) if kind == "adam" else None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        if self.kind == "sgd":
            return params - self.lr * grad
        if self.kind == "sgd_momentum":
            self.m = 0.9 * self.m + grad
            return params - self.lr * self.m
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.m = b1 * self.m + (1 - b1) * grad
        self.s = b2 * self.s + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1**self.t)
        s_hat = self.s / (1 - b2**self.t)
        return params - self.lr * m_hat / (np.sqrt(s_hat) + eps)


def cross_entropy_grad(spec: NetworkSpec, params, X, y, scales=None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of a batch and its gradient."""
    trace = forward_trace(spec, params, X, scales)
    n = X.shape[0]
    picked = trace.probs[np.arange(n), y]
    loss = float(-np.mean(np.log(np.maximum(picked, PROB_CLAMP))))
    dlogits = trace.probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    deltas = backprop(spec, params, trace, dlogits)
    return loss, assemble_gradient(spec, trace.acts, deltas)


def _epoch_order(labels: np.ndarray, class_count: int, balance: bool, rng: np.random.Generator) -> np.ndarray:
    if not balance:
        return rng.permutation(labels.size)
    groups = [np.flatnonzero(labels == c) for c in range(class_count)]
    target = max(g.size for g in groups)
    parts = []
    for g in groups:
        if g.size == 0:
            continue
        parts.append(rng.permutation(g) if g.size == target else rng.choice(g, target, replace=True))
    return rng.permutation(np.concatenate(parts))


def _check_shapes(spec: NetworkSpec, data: Dataset):
    if data.width != spec.input_width:
        raise ShapeError(f"data width {data.width} != network input width {spec.input_width}")
    if data.class_count != spec.class_count:
        raise ShapeError(f"data has {data.class_count} classes, network {spec.class_count}")


def train_classifier(spec: NetworkSpec, data: Dataset, cfg: TrainConfig, init: np.ndarray | None = None) -> TrainResult:
    """Minimize mean cross-entropy with serial mini-batches.

    Everything random (initialization, shuffling, dropout masks) derives from
    ``cfg.seed``, so identical arguments give bit-identical parameters.
    """
    _check_shapes(spec, data)
    params = init_params(spec, cfg.seed) if init is None else check_params(spec, init).copy()
    result = TrainResult(params)
    if cfg.epochs == 0 or cfg.learning_rate == 0.0:
        result.snapshots = [params.copy() for _ in range(cfg.epochs)] if cfg.snapshot_every_epoch else []
        return result
    opt = _Optimizer(cfg.optimizer, cfg.learning_rate, params.size)
    shuffle_rng = pass_generator(cfg.seed, _SHUFFLE_STREAM)
    dropout_rng = pass_generator(cfg.seed, _DROPOUT_STREAM)
    use_dropout = cfg.dropout is not None and cfg.dropout.rate > 0.0
    for epoch in range(cfg.epochs):
        order = _epoch_order(data.labels, data.class_count, cfg.balance_classes, shuffle_rng)
        losses = []
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            X, y = data.inputs[idx], data.labels[idx]
            scales = None
            if use_dropout:
                scales = [cfg.dropout.sample_scales(dropout_rng, (idx.size, w)) for w in spec.hidden_widths]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grad = cross_entropy_grad(spec, params, X, y, scales)
                finite = np.isfinite(loss) and np.all(np.isfinite(grad))
            except NumericError:
                finite = False
            if not finite:
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}, batch {start // cfg.batch_size}; "
                    f"try a smaller learning rate (now {cfg.learning_rate})"
                )
            params = opt.step(params, grad)
            losses.append(loss)
        result.epoch_losses.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.6f", epoch + 1, result.epoch_losses[-1])
        if cfg.snapshot_every_epoch:
            result.snapshots.append(params.copy())
    result.params = params
    return result


def train_ensemble(spec: NetworkSpec, data: Dataset, cfg: TrainConfig, ens: EnsembleConfig) -> list[TrainResult]:
    """Member ``k`` is trained independently with seed ``base_seed + k``."""
    return [
        train_classifier(spec, data, replace(cfg, seed=ens.base_seed + k))
        for k in range(ens.member_count)
    ]


def predict(spec: NetworkSpec, params, X) -> np.ndarray:
    return np.argmax(forward(spec, params, X), axis=-1)


def evaluate_accuracy(spec: NetworkSpec, params, data: Dataset) -> float:
    """Fraction of rows whose argmax prediction (lowest index on ties) is correct."""
    if len(data) == 0:
        return float("nan")
    return float(np.mean(predict(spec, params, data.inputs) == data.labels))
