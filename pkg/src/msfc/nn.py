"""Dense-layer substrate: MLPs with hand-derived gradients, losses, Adam.

All training math runs in float64 row-major numpy arrays; a row is one
sample.  Weight matrices are stored as (out, in) so a forward step is
``x @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FreezeViolationError, NumericError, ProtocolError

LEAKY_SLOPE = 0.01

ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "none")


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "leaky_relu":
        return np.where(pre > 0.0, pre, LEAKY_SLOPE * pre)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-pre))
    if name == "none":
        return pre
    raise ConfigError(f"unknown activation {name!r}")


def _activation_grad(name: str, pre: np.ndarray) -> np.ndarray:
    """Derivative of the activation w.r.t. its pre-activation input."""
    if name == "relu":
        return (pre > 0.0).astype(pre.dtype)
    if name == "leaky_relu":
        return np.where(pre > 0.0, 1.0, LEAKY_SLOPE)
    if name == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-pre))
        return s * (1.0 - s)
    if name == "none":
        return np.ones_like(pre)
    raise ConfigError(f"unknown activation {name!r}")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    activation: str = "none"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class Mlp:
    layers: list[Layer]
    frozen: bool = False

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "Mlp":
        return Mlp(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            frozen=self.frozen,
        )

    def param_bytes(self) -> bytes:
        """Concatenated little-endian float64 bytes of every parameter."""
        chunks = []
        for l in self.layers:
            chunks.append(np.ascontiguousarray(l.weight, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(l.bias, dtype="<f8").tobytes())
        return b"".join(chunks)


def init_mlp(sizes: list[int], activations: list[str], rng: np.random.Generator,
             frozen: bool = False) -> Mlp:
    """Seeded uniform +-sqrt(6/(fan_in+fan_out)) initialization, zero biases."""
    if len(activations) != len(sizes) - 1:
        raise ConfigError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return Mlp(layers, frozen=frozen)


def mlp_forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward pass; returns output and a cache for the backward pass.

    Cache holds (layer_input, pre_activation) per layer.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.in_dim:
        raise ConfigError(
            f"input has shape {x.shape}, expected (*, {mlp.in_dim})")
    cache = []
    out = x
    for layer in mlp.layers:
        pre = out @ layer.weight.T + layer.bias
        cache.append((out, pre))
        out = _activate(layer.activation, pre)
    return out, cache


def mlp_backward(mlp: Mlp, cache: list, dout: np.ndarray
                 ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backward pass; returns per-layer (dW, db) and the input gradient."""
    if len(cache) != len(mlp.layers):
        raise ConfigError("cache does not match this network")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(mlp.layers)
    d = np.asarray(dout, dtype=np.float64)
    for i in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[i]
        x, pre = cache[i]
        if x.shape[0] != d.shape[0] or pre.shape != d.shape:
            raise ConfigError("stale cache: shapes do not chain")
        dpre = d * _activation_grad(layer.activation, pre)
        grads[i] = (dpre.T @ x, dpre.sum(axis=0))
        d = dpre @ layer.weight
    return grads, d


def bce_multi_class(scores: np.ndarray, labels: np.ndarray, n_classes: int,
                    eps: float = 1e-7) -> tuple[float, np.ndarray]:
    """Binary cross-entropy over a (batch, classes) score matrix.

    Every class column is treated as a one-vs-rest binary problem; the sum
    is normalized by batch size times class count.  Scores are clamped to
    [eps, 1-eps] before the log; the gradient is zero where the clamp is
    active.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != n_classes:
        raise ConfigError("scores must be (batch, n_classes)")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ProtocolError("label outside the scored class set")
    n, c = scores.shape
    y = np.zeros((n, c))
    y[np.arange(n), labels] = 1.0
    r = np.clip(scores, eps, 1.0 - eps)
    loss = -np.sum(y * np.log(r) + (1.0 - y) * np.log(1.0 - r)) / (n * c)
    grad = -(y / r - (1.0 - y) / (1.0 - r)) / (n * c)
    grad = np.where((scores > eps) & (scores < 1.0 - eps), grad, 0.0)
    return float(loss), grad


def mse_multi_class(scores: np.ndarray, labels: np.ndarray, n_classes: int
                    ) -> tuple[float, np.ndarray]:
    """Mean squared error against one-hot targets (ablation loss)."""
    scores = np.asarray(scores, dtype=np.float64)
    n, c = scores.shape
    y = np.zeros((n, c))
    y[np.arange(n), labels] = 1.0
    diff = scores - y
    loss = float(np.sum(diff * diff) / (n * c))
    return loss, 2.0 * diff / (n * c)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray
                          ) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy; used only by the pretraining head."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    loss = -np.mean(np.log(probs[np.arange(n), labels] + 1e-300))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


@dataclass
class AdamState:
    """First-order adaptive optimizer state for one Mlp."""
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_mlp(cls, mlp: Mlp, learning_rate: float, **kw) -> "AdamState":
        state = cls(learning_rate=learning_rate, **kw)
        for layer in mlp.layers:
            state.first_moment.append(
                (np.zeros_like(layer.weight), np.zeros_like(layer.bias)))
            state.second_moment.append(
                (np.zeros_like(layer.weight), np.zeros_like(layer.bias)))
        return state


def optimizer_step(mlp: Mlp, grads: list, state: AdamState) -> None:
    """One Adam update, in place.  Frozen networks are rejected untouched."""
    if mlp.frozen:
        raise FreezeViolationError("optimizer step on frozen parameters")
    if len(grads) != len(mlp.layers):
        raise ConfigError("gradient count does not match layer count")
    for (dw, db), layer in zip(grads, mlp.layers):
        if dw.shape != layer.weight.shape or db.shape != layer.bias.shape:
            raise ConfigError("gradient shape mismatch")
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise NumericError("non-finite gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for i, ((dw, db), layer) in enumerate(zip(grads, mlp.layers)):
        for m, v, g, p in (
            (state.first_moment[i][0], state.second_moment[i][0], dw, layer.weight),
            (state.first_moment[i][1], state.second_moment[i][1], db, layer.bias),
        ):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
