"""Per-datapoint uncertainty scores.

All logarithms are natural, so entropies are in nats.  The Fisher form is
the quadratic form of the per-input Fisher information along the direction
``v = -d(entropy)/d(params)``, evaluated as ``sum_y (D_v p_y)^2 / p_y``
without ever forming the matrix.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .netcore import (
    PROB_CLAMP,
    DropoutConfig,
    NetworkSpec,
    NumericError,
    ShapeError,
    _as_batch,
    backprop,
    check_params,
    clamped_log,
    entropy_gradient,
    entropy_logit_grad,
    forward,
    forward_dropout,
    forward_trace,
    logit_jvp,
    perturb_params,
    unpack,
)

ZERO_GRAD_NORM = 1e-15
DEFAULT_PASSES = 32


class MetricKind(str, enum.Enum):
    ERROR_PROB = "error_prob"
    ENTROPY = "entropy"
    FISHER = "fisher"
    FISHER_FD = "fisher_fd"
    MC_DROPOUT_ENTROPY = "mc_dropout_entropy"
    ENSEMBLE_ENTROPY = "ensemble_entropy"

    def __str__(self):
        return self.value

    @classmethod
    def parse_list(cls, text: str) -> list["MetricKind"]:
        return [cls(part.strip()) for part in text.split(",") if part.strip()]


@dataclass(frozen=True)
class FisherSettings:
    direction_normalization: str = "unit_norm"
    fd_step: float = 1e-3
    prob_clamp: float = PROB_CLAMP

    def __post_init__(self):
        if self.direction_normalization not in ("unit_norm", "raw"):
            raise ValueError(f"unknown direction normalization {self.direction_normalization!r}")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")
        if not 0 < self.prob_clamp <= 1e-6:
            raise ValueError("prob_clamp must lie in (0, 1e-6]")


DEFAULT_SETTINGS = FisherSettings()


class FisherDirection(NamedTuple):
    vector: np.ndarray
    is_zero: bool


def error_probability(p) -> np.ndarray | float:
    """``1 - max_y p_y``; works row-wise on a batch."""
    p = np.asarray(p, dtype=np.float64)
    out = 1.0 - np.max(p, axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy(p, clamp: float = PROB_CLAMP) -> np.ndarray | float:
    p = np.asarray(p, dtype=np.float64)
    out = -np.sum(p * clamped_log(p, clamp), axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_divergence(p, q, clamp: float = PROB_CLAMP) -> np.ndarray | float:
    """``sum p log(p/q)`` with both logs clamped."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    out = np.sum(p * (clamped_log(p, clamp) - clamped_log(q, clamp)), axis=-1)
    return float(out) if out.ndim == 0 else out


def fisher_direction(spec: NetworkSpec, params, x, settings: FisherSettings = DEFAULT_SETTINGS) -> FisherDirection:
    """Negative entropy gradient, optionally scaled to unit length.

    A gradient with norm below 1e-15 (e.g. at a uniform output) gives the
    zero vector with ``is_zero`` set.
    """
    grad = entropy_gradient(spec, params, x, settings.prob_clamp)
    norm = float(np.linalg.norm(grad))
    if norm < ZERO_GRAD_NORM:
        return FisherDirection(np.zeros_like(grad), True)
    v = -grad
    if settings.direction_normalization == "unit_norm":
        v = v / norm
    return FisherDirection(v, False)


def _fisher_from_jvp(probs: np.ndarray, dlogits: np.ndarray, clamp: float) -> np.ndarray:
    centred = dlogits - np.sum(probs * dlogits, axis=-1, keepdims=True)
    dp = probs * centred
    return np.sum(dp * dp / np.maximum(probs, clamp), axis=-1)


def fisher_form_along(spec: NetworkSpec, params, x, v, clamp: float = PROB_CLAMP) -> float:
    """Fisher form of input ``x`` along an arbitrary direction ``v``."""
    X, single = _as_batch(spec, x)
    if not single:
        raise ShapeError("fisher_form_along takes a single input vector")
    probs, dlogits = logit_jvp(spec, params, X, v)
    value = float(_fisher_from_jvp(probs, dlogits, clamp)[0])
    if not np.isfinite(value):
        raise NumericError("non-finite Fisher form")
    return value


def fisher_form(spec: NetworkSpec, params, x, settings: FisherSettings = DEFAULT_SETTINGS) -> float:
    direction = fisher_direction(spec, params, x, settings)
    if direction.is_zero:
        return 0.0
    return fisher_form_along(spec, params, x, direction.vector, settings.prob_clamp)


def fisher_form_fd(spec: NetworkSpec, params, x, settings: FisherSettings = DEFAULT_SETTINGS) -> float:
    """Fisher form with directional derivatives taken by central differences.

    The step is ``fd_step / max(1, |v|)``, so it never exceeds ``fd_step``
    in parameter space.
    """
    direction = fisher_direction(spec, params, x, settings)
    if direction.is_zero:
        return 0.0
    v = direction.vector
    h = settings.fd_step / max(1.0, float(np.linalg.norm(v)))
    p_plus = forward(spec, perturb_params(params, v, h), x)
    p_minus = forward(spec, perturb_params(params, v, -h), x)
    dp = (p_plus - p_minus) / (2 * h)
    dlogp = (clamped_log(p_plus, settings.prob_clamp) - clamped_log(p_minus, settings.prob_clamp)) / (2 * h)
    value = float(np.sum(dp * dlogp))
    if not np.isfinite(value):
        raise NumericError("non-finite Fisher form")
    return value


def fisher_form_batch(spec: NetworkSpec, params, X, settings: FisherSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Fisher form for every row of ``X``, each along its own direction.

    Every per-sample entropy gradient is a sum of rank-one layer terms
    ``delta_l a_{l-1}^T``, so ``dW_l a_{l-1} = delta_l |a_{l-1}|^2`` and the
    directional derivative needs no per-sample parameter vectors.
    """
    X, _ = _as_batch(spec, X)
    params = check_params(spec, params)
    clamp = settings.prob_clamp
    trace = forward_trace(spec, params, X)
    deltas = backprop(spec, params, trace, entropy_logit_grad(trace.probs, clamp))
    # |a|^2 + 1 accounts for the bias entries of the gradient
    act_sq = [np.sum(a * a, axis=1) + 1.0 for a in trace.acts[:-1]]
    grad_sq = sum(np.sum(d * d, axis=1) * s for d, s in zip(deltas, act_sq))
    norm = np.sqrt(grad_sq)
    zero = norm < ZERO_GRAD_NORM
    if settings.direction_normalization == "unit_norm":
        coef = -1.0 / np.where(zero, 1.0, norm)
    else:
        coef = -np.ones_like(norm)
    coef[zero] = 0.0

    weights = unpack(spec, params)
    da = np.zeros_like(X)
    n_last = len(spec.layers) - 1
    for i, ((W, _b), layer) in enumerate(zip(weights, spec.layers)):
        dz = da @ W.T + (coef * act_sq[i])[:, None] * deltas[i]
        if i < n_last and layer.activation == "relu":
            dz = dz * (trace.pre[i] > 0.0)
        da = dz
    out = _fisher_from_jvp(trace.probs, da, clamp)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite Fisher form")
    return out


def mc_dropout_entropy(
    spec: NetworkSpec, params, x, cfg: DropoutConfig, passes: int = DEFAULT_PASSES
) -> np.ndarray | float:
    """Mean entropy over ``passes`` dropout forward passes (indices 0..passes-1)."""
    if passes < 1:
        raise ValueError("passes must be at least 1")
    total = 0.0
    for k in range(passes):
        total = total + entropy(forward_dropout(spec, params, x, cfg, k))
    return total / passes


def ensemble_entropy(members: Sequence[tuple[NetworkSpec, np.ndarray]], x, mixture: bool = False):
    """Mean of the members' entropies.

    With ``mixture=True`` returns instead the entropy of the averaged
    probability vector.
    """
    if not members:
        raise ValueError("ensemble needs at least one member")
    ref = members[0][0]
    for spec, _ in members:
        if spec.input_width != ref.input_width or spec.class_count != ref.class_count:
            raise ShapeError("ensemble members disagree on input width or class count")
    probs = [forward(spec, params, x) for spec, params in members]
    if mixture:
        return entropy(np.mean(probs, axis=0))
    return np.mean([entropy(p) for p in probs], axis=0)


def score_batch(
    kind: MetricKind,
    spec: NetworkSpec,
    params,
    X,
    *,
    settings: FisherSettings = DEFAULT_SETTINGS,
    dropout: DropoutConfig | None = None,
    passes: int = DEFAULT_PASSES,
    members: Sequence[tuple[NetworkSpec, np.ndarray]] | None = None,
) -> np.ndarray:
    """Raw scores of one metric for every row of ``X``."""
    kind = MetricKind(kind)
    X, _ = _as_batch(spec, X)
    if kind is MetricKind.ERROR_PROB:
        return error_probability(forward(spec, params, X))
    if kind is MetricKind.ENTROPY:
        return entropy(forward(spec, params, X), settings.prob_clamp)
    if kind is MetricKind.FISHER:
        return fisher_form_batch(spec, params, X, settings)
    if kind is MetricKind.FISHER_FD:
        return np.array([fisher_form_fd(spec, params, x, settings) for x in X])
    if kind is MetricKind.MC_DROPOUT_ENTROPY:
        if dropout is None:
            raise ValueError("mc_dropout_entropy needs a dropout configuration")
        return np.asarray(mc_dropout_entropy(spec, params, X, dropout, passes))
    if kind is MetricKind.ENSEMBLE_ENTROPY:
        if not members or len(members) < 2:
            raise ValueError("ensemble_entropy needs an ensemble of at least two models")
        return np.asarray(ensemble_entropy(members, X))
    raise ValueError(f"unhandled metric {kind}")
