"""Dense feed-forward networks with hand-written backpropagation.

Everything runs in float64. A network is a list of :class:`DenseLayer`
objects; :func:`forward` returns the output together with a
:class:`ForwardCache`, and :func:`backward` turns an upstream gradient
into a :class:`GradTape` holding parameter and input gradients.

The three losses used by the adversarial trainer live here too:
binary cross-entropy for the label head, categorical cross-entropy for
the domain head, and the joint objective ``L_y - lambda * L_d``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CacheError, ConfigurationError, LabelError, NumericInputError, ShapeError

ACTIVATIONS = ("relu", "identity", "softmax")

PROB_EPS = 1e-12

_cache_ids = itertools.count()


@dataclass(eq=False)
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"weights {self.weights.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(eq=False)
class Mlp:
    layers: list[DenseLayer]
    # bumped by every in-place parameter update; lets backward() reject stale caches
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("an Mlp needs at least one layer")
        for k, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer {k} outputs {a.out_dim} but layer {k + 1} expects {b.in_dim}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live parameter arrays."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def copy(self) -> "Mlp":
        return Mlp([DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activations
    post: list[np.ndarray]  # activations
    owner: tuple[int, int]  # (id of network, network version)


@dataclass
class GradTape:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_grad: np.ndarray

    def parameters(self) -> list[np.ndarray]:
        out = []
        for gw, gb in zip(self.weights, self.biases):
            out.extend((gw, gb))
        return out

    def scaled(self, factor: float) -> "GradTape":
        return GradTape(
            [factor * g for g in self.weights],
            [factor * g for g in self.biases],
            factor * self.input_grad,
        )


@dataclass
class OptimConfig:
    method: str = "sgd-momentum"
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.method not in ("sgd", "sgd-momentum"):
            raise ConfigurationError(f"unknown optimizer method {self.method!r}")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")


def init_mlp(
    input_dim: int,
    hidden_dims: Sequence[int],
    output_dim: int,
    seed: int | np.random.Generator,
    output_activation: str = "softmax",
) -> Mlp:
    """Build a network with rectifier hidden layers and Glorot-uniform weights.

    ``seed`` may be an integer or an already-seeded ``numpy`` generator.
    Biases start at zero.
    """
    hidden_dims = list(hidden_dims)
    dims = [input_dim, *hidden_dims, output_dim]
    if not hidden_dims:
        raise ConfigurationError("hidden_dims must contain at least one layer")
    if any(int(d) != d or d <= 0 for d in dims):
        raise ConfigurationError(f"all dimensions must be positive integers, got {dims}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        act = output_activation if k == len(dims) - 2 else "relu"
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return Mlp(layers)


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return relu(z)
    if activation == "softmax":
        return softmax(z)
    return z


def forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.input_dim:
        raise ShapeError(f"expected input of shape (n, {mlp.input_dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericInputError("input contains NaN or infinite values")
    inputs, pre, post = [], [], []
    a = x
    for layer in mlp.layers:
        inputs.append(a)
        z = a @ layer.weights.T + layer.bias
        a = _activate(z, layer.activation)
        pre.append(z)
        post.append(a)
    return a, ForwardCache(inputs, pre, post, (id(mlp), mlp.version))


def predict(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    return forward(mlp, x)[0]


def backward(mlp: Mlp, cache: ForwardCache, upstream_grad: np.ndarray) -> GradTape:
    """Backpropagate ``upstream_grad`` (gradient w.r.t. the network output)."""
    if cache.owner != (id(mlp), mlp.version) or len(cache.pre) != len(mlp.layers):
        raise CacheError("forward cache does not match this network (stale or foreign)")
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != cache.post[-1].shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {cache.post[-1].shape}")
    n_layers = len(mlp.layers)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for k in range(n_layers - 1, -1, -1):
        layer = mlp.layers[k]
        if layer.activation == "relu":
            g = g * (cache.pre[k] > 0)
        elif layer.activation == "softmax":
            s = cache.post[k]
            g = s * (g - np.sum(g * s, axis=1, keepdims=True))
        gw[k] = g.T @ cache.inputs[k]
        gb[k] = g.sum(axis=0)
        g = g @ layer.weights
    return GradTape(gw, gb, g)


def _check_binary(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise LabelError("labels must be 0 or 1")
    return y.astype(np.float64)


def _reduce(per_row: np.ndarray, reduction: str) -> float:
    if reduction == "sum":
        return float(per_row.sum())
    if reduction == "mean":
        return float(per_row.mean()) if per_row.size else 0.0
    raise ConfigurationError(f"unknown reduction {reduction!r}")


def bce_loss(p_pos, y, reduction: str = "sum", pos_weight: float = 1.0) -> float:
    """Binary cross-entropy ``sum_i y_i ln(1/p_i) + (1 - y_i) ln(1/(1 - p_i))``.

    Probabilities are clamped to ``[1e-12, 1 - 1e-12]`` first. ``pos_weight``
    scales the contribution of positive rows.
    """
    y = _check_binary(y)
    p = np.clip(np.asarray(p_pos, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    per_row = pos_weight * y * -np.log(p) + (1.0 - y) * -np.log1p(-p)
    return _reduce(per_row, reduction)


def bce_grad(p_pos, y, reduction: str = "sum", pos_weight: float = 1.0) -> np.ndarray:
    """Derivative of :func:`bce_loss` with respect to ``p_pos``."""
    y = _check_binary(y)
    raw = np.asarray(p_pos, dtype=np.float64)
    p = np.clip(raw, PROB_EPS, 1.0 - PROB_EPS)
    g = -pos_weight * y / p + (1.0 - y) / (1.0 - p)
    g = np.where(p == raw, g, 0.0)
    if reduction == "mean" and g.size:
        g = g / g.size
    return g


def label_head_grad(probs: np.ndarray, y, reduction: str = "sum", pos_weight: float = 1.0) -> np.ndarray:
    """Gradient of the label loss w.r.t. a 2-column softmax output.

    Only the second column (the positive-class probability) enters the loss.
    """
    g = np.zeros_like(probs)
    g[:, 1] = bce_grad(probs[:, 1], y, reduction, pos_weight)
    return g


def _check_one_hot(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or not np.all((d == 0) | (d == 1)) or not np.all(d.sum(axis=1) == 1):
        raise LabelError("domain labels must be one-hot rows")
    return d


def domain_ce_loss(probs, d, reduction: str = "sum") -> float:
    """Categorical cross-entropy ``sum_i sum_j d_ij ln(1/probs_ij)``."""
    d = _check_one_hot(d)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != d.shape:
        raise ShapeError(f"probabilities {probs.shape} and labels {d.shape} differ in shape")
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    per_row = -(d * np.log(p)).sum(axis=1)
    return _reduce(per_row, reduction)


def domain_ce_grad(probs, d, reduction: str = "sum") -> np.ndarray:
    d = _check_one_hot(d)
    raw = np.asarray(probs, dtype=np.float64)
    p = np.clip(raw, PROB_EPS, 1.0 - PROB_EPS)
    g = np.where(p == raw, -d / p, 0.0)
    if reduction == "mean" and len(g):
        g = g / len(g)
    return g


def total_objective(l_y: float, l_d: float, lam: float) -> float:
    return l_y - lam * l_d


def grad_reverse(upstream_grad, lam: float) -> np.ndarray:
    """Backward pass of the gradient reversal layer (its forward pass is identity)."""
    return -lam * np.asarray(upstream_grad, dtype=np.float64)


class OptimState:
    """Momentum buffers for one network."""

    def __init__(self, mlp: Mlp):
        self.velocity = [np.zeros_like(p) for p in mlp.parameters()]


def optim_step(mlp: Mlp, tape: GradTape, cfg: OptimConfig, state: OptimState | None = None) -> Mlp:
    """Apply one (momentum) SGD update in place and return ``mlp``.

    ``state`` is required for ``sgd-momentum``; without it the step is plain SGD.
    """
    params = mlp.parameters()
    grads = tape.parameters()
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeError("gradient tape does not mirror the network's parameter shapes")
    use_momentum = cfg.method == "sgd-momentum" and state is not None
    for k, (p, g) in enumerate(zip(params, grads)):
        if cfg.weight_decay and k % 2 == 0:
            g = g + cfg.weight_decay * p
        if use_momentum:
            v = state.velocity[k]
            v *= cfg.momentum
            v += g
            g = v
        p -= cfg.learning_rate * g
    mlp.version += 1
    return mlp


# -- serialization ---------------------------------------------------------

def _encode_array(a: np.ndarray):
    return {"shape": list(a.shape), "data": [repr(float(v)) for v in a.ravel()]}


def _decode_array(obj) -> np.ndarray:
    return np.array([float(v) for v in obj["data"]], dtype=np.float64).reshape(obj["shape"])


def mlp_to_dict(mlp: Mlp) -> dict:
    """JSON-ready description; floats are stored as shortest round-trip decimal strings."""
    return {
        "input_dim": mlp.input_dim,
        "output_dim": mlp.output_dim,
        "layers": [
            {
                "activation": l.activation,
                "weights": _encode_array(l.weights),
                "bias": _encode_array(l.bias),
            }
            for l in mlp.layers
        ],
    }


def mlp_from_dict(obj: dict) -> Mlp:
    layers = [
        DenseLayer(_decode_array(l["weights"]), _decode_array(l["bias"]), l["activation"])
        for l in obj["layers"]
    ]
    mlp = Mlp(layers)
    if mlp.input_dim != obj["input_dim"] or mlp.output_dim != obj["output_dim"]:
        raise ShapeError("checkpoint dims disagree with stored layers")
    return mlp
