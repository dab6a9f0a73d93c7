"""Small dense classifier with hand-written reverse mode.

Tensors are plain float64 numpy arrays, row-major.  Weights of a dense
layer have shape (fan_in, fan_out) so that ``z = x @ W + b``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "softplus", "identity")
MAX_LAYERS = 6


class ShapeError(ValueError):
    pass


class LabelError(ValueError):
    pass


@dataclass
class Dense:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape[0] != self.weights.shape[1]:
            raise ShapeError(f"weights {self.weights.shape} and bias {self.bias.shape} do not match")

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]


@dataclass
class Network:
    layers: list[Dense] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        if len(self.layers) > MAX_LAYERS:
            raise ShapeError(f"at most {MAX_LAYERS} layers supported")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.fan_out != b.fan_in:
                raise ShapeError(f"layer dims do not chain: {a.fan_out} -> {b.fan_in}")
        if self.layers[-1].activation != "identity":
            raise ShapeError("final layer must be identity (logits)")
        if self.num_classes < 2:
            raise ShapeError("need at least two classes")

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def num_classes(self) -> int:
        return self.layers[-1].fan_out

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].fan_in] + [l.fan_out for l in self.layers]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (W0, b0, W1, b1, ...); live references."""
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.bias])
        return out

    def copy(self) -> "Network":
        return copy.deepcopy(self)


def init_network(dims, activation: str = "relu", seed: int = 0) -> Network:
    """Glorot-uniform weights, zero biases; last layer is linear."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ShapeError("need at least input and output dims")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        act = "identity" if i == len(dims) - 2 else activation
        layers.append(Dense(w, np.zeros(fan_out), act))
    return Network(layers)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "softplus":
        return np.logaddexp(0.0, z)
    return z


def _act_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "softplus":
        # sigmoid, written to avoid overflow for large |z|
        return np.exp(-np.logaddexp(0.0, -z))
    return np.ones_like(z)


def _check_inputs(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"expected inputs of shape [n, {net.input_dim}], got {x.shape}")
    return x


def forward(net: Network, inputs: np.ndarray) -> np.ndarray:
    h = _check_inputs(net, inputs)
    for layer in net.layers:
        h = _act(h @ layer.weights + layer.bias, layer.activation)
    return h


def _forward_cache(net: Network, x: np.ndarray):
    hs, zs = [x], []
    h = x
    for layer in net.layers:
        z = h @ layer.weights + layer.bias
        h = _act(z, layer.activation)
        zs.append(z)
        hs.append(h)
    return hs, zs


def per_example_loss(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Cross-entropy of each row."""
    labels = _check_labels(labels, logits.shape)
    lse = _logsumexp(logits)
    return lse - logits[np.arange(logits.shape[0]), labels]


def _logsumexp(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1)
    return m + np.log(np.exp(logits - m[:, None]).sum(axis=1))


def _check_labels(labels, shape) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= shape[1]):
        raise LabelError(f"labels must lie in [0, {shape[1]})")
    return labels.astype(np.int64)


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, labels, weights=None) -> tuple[float, np.ndarray]:
    """Mean (or weighted) cross-entropy and its gradient wrt the logits.

    ``weights`` defaults to 1/n per row; they must sum to one.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape)
    n = logits.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    losses = _logsumexp(logits) - logits[np.arange(n), labels]
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    grad *= w[:, None]
    return float(w @ losses), grad


def backward(net: Network, inputs, labels, weights=None):
    """Loss, parameter gradients (same order as ``net.params()``) and input gradient."""
    x = _check_inputs(net, inputs)
    hs, zs = _forward_cache(net, x)
    loss, g = cross_entropy_loss(hs[-1], labels, weights)
    grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        g = g * _act_grad(zs[i], layer.activation)
        grads[2 * i] = hs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.weights.T
    return loss, grads, g


def input_gradient(net: Network, inputs, labels):
    """Per-example losses and gradient of their sum wrt the inputs (attack primitive)."""
    x = _check_inputs(net, inputs)
    hs, zs = _forward_cache(net, x)
    logits = hs[-1]
    labels = _check_labels(labels, logits.shape)
    n = logits.shape[0]
    losses = _logsumexp(logits) - logits[np.arange(n), labels]
    g = softmax(logits)
    g[np.arange(n), labels] -= 1.0
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        g = (g * _act_grad(zs[i], layer.activation)) @ layer.weights.T
    return losses, logits, g


def predict(net: Network, inputs) -> np.ndarray:
    return forward(net, inputs).argmax(axis=1)


def accuracy(net: Network, inputs, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float((predict(net, inputs) == labels).mean())


def grad_check(net: Network, inputs, labels, step: float = 1e-5, n_coords: int = 100,
               seed: int = 0, include_inputs: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples ``n_coords`` coordinates across all parameters (and inputs when
    ``include_inputs``); error is |analytic - numeric| / max(1, |analytic|).
    """
    if not (1e-8 < step < 1e-3):
        raise ValueError(f"step must lie in (1e-8, 1e-3), got {step}")
    x = _check_inputs(net, inputs).copy()
    _, pgrads, xgrad = backward(net, x, labels)
    arrays = net.params() + ([x] if include_inputs else [])
    analytic = pgrads + ([xgrad] if include_inputs else [])
    sizes = np.array([a.size for a in arrays])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def loss_at() -> float:
        return backward(net, x, labels)[0]

    worst = 0.0
    for k in flat:
        a = int(np.searchsorted(offsets, k, side="right") - 1)
        idx = np.unravel_index(int(k - offsets[a]), arrays[a].shape)
        old = arrays[a][idx]
        arrays[a][idx] = old + step
        up = loss_at()
        arrays[a][idx] = old - step
        down = loss_at()
        arrays[a][idx] = old
        numeric = (up - down) / (2 * step)
        exact = analytic[a][idx]
        worst = max(worst, abs(exact - numeric) / max(1.0, abs(exact)))
    return worst
