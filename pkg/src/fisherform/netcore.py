"""Dense softmax classifiers on a flat float64 parameter vector.

Parameters live in a single 1-D ``float64`` array.  Layers are stored one
after another; each layer contributes its weight matrix of shape
``(out, in)`` in row-major order followed by its bias vector.  The softmax
is never listed as a layer activation: :func:`forward` always applies it to
the last layer's output.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")
PROB_CLAMP = 1e-12

MODEL_MAGIC = b"FGNET01\n"
_FILE_ACT_NAMES = {"relu": "relu", "identity": "id"}
_FILE_ACT_LOOKUP = {v: k for k, v in _FILE_ACT_NAMES.items()}


class ShapeError(ValueError):
    """Array dimensions disagree with the network description."""


class NumericError(ArithmeticError):
    """A computation produced NaN or infinity."""


class ModelFormatError(ValueError):
    """Base class for unreadable model files."""


class MagicMismatchError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


class HeaderMismatchError(ModelFormatError):
    pass


@dataclass(frozen=True)
class DenseLayerSpec:
    in_width: int
    out_width: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_width < 1 or self.out_width < 1:
            raise ShapeError(f"layer widths must be positive, got {self.in_width}->{self.out_width}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def param_count(self) -> int:
        return self.in_width * self.out_width + self.out_width


@dataclass(frozen=True)
class NetworkSpec:
    input_width: int
    class_count: int
    layers: tuple[DenseLayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        if self.layers[0].in_width != self.input_width:
            raise ShapeError("first layer does not match input_width")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_width != b.in_width:
                raise ShapeError(f"layer widths do not chain: {a.out_width} -> {b.in_width}")
        if self.layers[-1].out_width != self.class_count:
            raise ShapeError("last layer width must equal class_count")

    @classmethod
    def from_widths(cls, widths: Sequence[int], hidden_activation: str = "relu") -> "NetworkSpec":
        """Build ``w0 -> w1 -> ... -> C``; hidden layers use ``hidden_activation``."""
        widths = [int(w) for w in widths]
        if len(widths) < 2:
            raise ShapeError("need at least an input and an output width")
        layers = []
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            last = i == len(widths) - 2
            layers.append(DenseLayerSpec(a, b, "identity" if last else hidden_activation))
        return cls(widths[0], widths[-1], tuple(layers))

    @classmethod
    def from_arch(cls, arch: str) -> "NetworkSpec":
        """Parse an architecture string such as ``"784-128-64-10"``."""
        try:
            widths = [int(part) for part in arch.split("-")]
        except ValueError:
            raise ValueError(f"bad architecture string {arch!r}") from None
        return cls.from_widths(widths)

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    @property
    def arch(self) -> str:
        return "-".join(str(w) for w in [self.input_width] + [l.out_width for l in self.layers])

    @property
    def hidden_widths(self) -> list[int]:
        return [layer.out_width for layer in self.layers[:-1]]


def unpack(spec: NetworkSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Return ``(W, b)`` views into ``params``, one pair per layer."""
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != spec.param_count:
        raise ShapeError(f"expected {spec.param_count} parameters, got shape {params.shape}")
    out = []
    offset = 0
    for layer in spec.layers:
        n_w = layer.in_width * layer.out_width
        W = params[offset:offset + n_w].reshape(layer.out_width, layer.in_width)
        offset += n_w
        b = params[offset:offset + layer.out_width]
        offset += layer.out_width
        out.append((W, b))
    return out


def check_params(spec: NetworkSpec, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.param_count:
        raise ShapeError(f"expected {spec.param_count} parameters, got shape {params.shape}")
    if not np.all(np.isfinite(params)):
        raise NumericError("parameter vector contains non-finite entries")
    return params


def _as_batch(spec: NetworkSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != spec.input_width:
        raise ShapeError(f"input width {X.shape[-1] if X.ndim else 0} != {spec.input_width}")
    return X, single


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


class Trace(NamedTuple):
    """Intermediate values of one forward pass over a batch."""

    acts: list[np.ndarray]  # acts[0] is the input, acts[l+1] the output of layer l (pre-softmax for the last)
    pre: list[np.ndarray]  # pre-activations per layer
    scales: list[np.ndarray | None]  # dropout multipliers applied to hidden outputs
    probs: np.ndarray


def forward_trace(spec: NetworkSpec, params, X: np.ndarray, scales=None) -> Trace:
    """Batched forward pass keeping every intermediate.

    ``scales`` optionally holds one multiplier array per hidden layer,
    broadcastable against ``(n, width)``.
    """
    weights = unpack(spec, check_params(spec, params))
    n_hidden = len(spec.layers) - 1
    if scales is None:
        scales = [None] * n_hidden
    acts = [X]
    pre = []
    a = X
    # overflow surfaces as NumericError below, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        for i, ((W, b), layer) in enumerate(zip(weights, spec.layers)):
            z = a @ W.T + b
            pre.append(z)
            if i < n_hidden:
                a = np.maximum(z, 0.0) if layer.activation == "relu" else z
                if scales[i] is not None:
                    a = a * scales[i]
            else:
                a = z
            acts.append(a)
    logits = acts[-1]
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits in forward pass")
    return Trace(acts, pre, list(scales), softmax(logits))


def forward(spec: NetworkSpec, params, x) -> np.ndarray:
    """Softmax class probabilities for one input or a batch of inputs."""
    X, single = _as_batch(spec, x)
    probs = forward_trace(spec, params, X).probs
    return probs[0] if single else probs


@dataclass(frozen=True)
class DropoutConfig:
    """Dropout on hidden-layer outputs.

    ``rate`` is the drop probability for ``bernoulli`` (kept units are scaled
    by ``1/(1-rate)``); for ``gaussian`` units are multiplied by
    ``N(1, rate/(1-rate))``.
    """

    kind: str = "bernoulli"
    rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("bernoulli", "gaussian"):
            raise ValueError(f"unknown dropout kind {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("dropout seed must be a 64-bit unsigned integer")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "DropoutConfig":
        """Parse ``"bernoulli:0.5"`` or ``"gaussian:0.5"``."""
        kind, _, rate = text.partition(":")
        return cls(kind.strip(), float(rate) if rate else 0.5, seed)

    def sample_scales(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "bernoulli":
            keep = rng.random(shape) >= self.rate
            return keep / (1.0 - self.rate)
        alpha = self.rate / (1.0 - self.rate)
        return 1.0 + np.sqrt(alpha) * rng.standard_normal(shape)

    def pass_scales(self, spec: NetworkSpec, pass_index: int) -> list[np.ndarray]:
        """Multipliers for every hidden layer, fixed by ``(seed, pass_index)``."""
        if pass_index < 0:
            raise ValueError("pass_index must be non-negative")
        rng = pass_generator(self.seed, pass_index)
        return [self.sample_scales(rng, (w,)) for w in spec.hidden_widths]


def pass_generator(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for sub-stream ``index`` of ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def forward_dropout(spec: NetworkSpec, params, x, cfg: DropoutConfig, pass_index: int) -> np.ndarray:
    """Stochastic forward pass with dropout on the hidden outputs.

    The masks depend only on ``(cfg.seed, pass_index)``; in a batch every
    row sees the same masks, so row ``i`` equals the single-input call.
    """
    X, single = _as_batch(spec, x)
    if cfg.rate == 0.0:
        probs = forward_trace(spec, params, X).probs
    else:
        probs = forward_trace(spec, params, X, cfg.pass_scales(spec, pass_index)).probs
    return probs[0] if single else probs


def clamped_log(p, clamp: float = PROB_CLAMP) -> np.ndarray:
    return np.log(np.maximum(p, clamp))


def entropy_logit_grad(probs: np.ndarray, clamp: float = PROB_CLAMP) -> np.ndarray:
    """d/dlogits of ``-sum p log max(p, clamp)``, row-wise."""
    dh_dp = np.where(probs > clamp, -(np.log(np.maximum(probs, clamp)) + 1.0), -np.log(clamp))
    mean = np.sum(probs * dh_dp, axis=-1, keepdims=True)
    return probs * (dh_dp - mean)


def backprop(spec: NetworkSpec, params, trace: Trace, dlogits: np.ndarray) -> list[np.ndarray]:
    """Propagate ``dL/dlogits`` back; returns ``dL/dpre`` for every layer."""
    weights = unpack(spec, params)
    deltas = [None] * len(spec.layers)
    delta = dlogits
    for i in range(len(spec.layers) - 1, -1, -1):
        deltas[i] = delta
        if i == 0:
            break
        W = weights[i][0]
        da = delta @ W
        if trace.scales[i - 1] is not None:
            da = da * trace.scales[i - 1]
        if spec.layers[i - 1].activation == "relu":
            da = da * (trace.pre[i - 1] > 0.0)
        delta = da
    return deltas


def assemble_gradient(spec: NetworkSpec, acts: list[np.ndarray], deltas: list[np.ndarray]) -> np.ndarray:
    """Sum the per-sample outer products into one flat gradient vector."""
    parts = []
    for a, d in zip(acts[:-1], deltas):
        parts.append((d.T @ a).ravel())
        parts.append(d.sum(axis=0))
    return np.concatenate(parts)


def entropy_gradient(spec: NetworkSpec, params, x, clamp: float = PROB_CLAMP) -> np.ndarray:
    """Exact gradient of the predictive entropy w.r.t. all parameters for one input."""
    X, single = _as_batch(spec, x)
    if not single:
        raise ShapeError("entropy_gradient takes a single input vector")
    params = check_params(spec, params)
    trace = forward_trace(spec, params, X)
    deltas = backprop(spec, params, trace, entropy_logit_grad(trace.probs, clamp))
    grad = assemble_gradient(spec, trace.acts, deltas)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite entropy gradient")
    return grad


def logit_jvp(spec: NetworkSpec, params, X: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward-mode derivative of the logits along parameter direction ``v``.

    Returns ``(probs, d_logits)`` for the batch ``X``.
    """
    params = check_params(spec, params)
    weights = unpack(spec, params)
    dweights = unpack(spec, np.asarray(v, dtype=np.float64))
    a = X
    da = np.zeros_like(X)
    n_last = len(spec.layers) - 1
    for i, ((W, b), (dW, db), layer) in enumerate(zip(weights, dweights, spec.layers)):
        z = a @ W.T + b
        dz = da @ W.T + a @ dW.T + db
        if i < n_last and layer.activation == "relu":
            on = z > 0.0
            a, da = z * on, dz * on
        else:
            a, da = z, dz
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite logits in forward pass")
    return softmax(a), da


def perturb_params(params, v, epsilon: float) -> np.ndarray:
    """Return ``params + epsilon * v`` as a new array."""
    params = np.asarray(params, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if params.shape != v.shape:
        raise ShapeError(f"direction shape {v.shape} != parameter shape {params.shape}")
    return params + epsilon * v


def save_model(spec: NetworkSpec, params, path) -> None:
    params = check_params(spec, params)
    header = {
        "input_width": spec.input_width,
        "class_count": spec.class_count,
        "layers": [
            {"in": l.in_width, "out": l.out_width, "act": _FILE_ACT_NAMES[l.activation]}
            for l in spec.layers
        ],
        "dtype": "f64le",
        "param_count": spec.param_count,
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(params.astype("<f8").tobytes())


def load_model(path) -> tuple[NetworkSpec, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise MagicMismatchError(f"{path}: not an FGN model file")
    pos = len(MODEL_MAGIC)
    if len(data) < pos + 4:
        raise TruncatedModelError(f"{path}: missing header length")
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + hlen:
        raise TruncatedModelError(f"{path}: header truncated")
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        layers = tuple(
            DenseLayerSpec(int(l["in"]), int(l["out"]), _FILE_ACT_LOOKUP[l["act"]])
            for l in header["layers"]
        )
        spec = NetworkSpec(int(header["input_width"]), int(header["class_count"]), layers)
        count = int(header["param_count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: bad header: {exc}") from exc
    if header.get("dtype") != "f64le":
        raise ModelFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    if count != spec.param_count:
        raise HeaderMismatchError(
            f"{path}: header promises {count} parameters, layers need {spec.param_count}"
        )
    pos += hlen
    blob = data[pos:]
    if len(blob) < 8 * count:
        raise TruncatedModelError(f"{path}: expected {8 * count} parameter bytes, found {len(blob)}")
    if len(blob) != 8 * count:
        raise HeaderMismatchError(f"{path}: {len(blob) - 8 * count} trailing bytes after parameters")
    params = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    return spec, params
