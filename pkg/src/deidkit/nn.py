"""Dense multilayer perceptrons with exact reverse-mode gradients and Adam.

Every trainable model in the package is a :class:`DenseNet`. Forward passes
return a cache that :func:`backward` consumes; nothing is stored on the
network itself, so a net can be shared read-only between callers.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from deidkit import kernels
from deidkit.errors import ConfigurationError, DimensionError, NumericError

ACTIVATIONS = {"linear": 0, "tanh": 1, "sigmoid": 2}


@dataclass
class DenseNet:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "tanh"
    final_activation: str = "tanh"

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def activation(self, i: int) -> str:
        return self.final_activation if i == self.n_layers - 1 else self.hidden_activation

    def params(self) -> list[np.ndarray]:
        """Parameters in canonical order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.params()]

    def copy(self) -> "DenseNet":
        return DenseNet(
            list(self.layer_sizes),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.final_activation,
        )

    def param_hash(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.layer_sizes, self.hidden_activation, self.final_activation)).encode())
        for p in self.params():
            h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
        return h.hexdigest()

    def n_params(self) -> int:
        return sum(p.size for p in self.params())


def _check_activation(tag: str, allowed) -> None:
    if tag not in allowed:
        raise ConfigurationError(f"unknown activation {tag!r}; expected one of {sorted(allowed)}")


def init_network(layer_sizes, hidden_activation="tanh", final_activation="tanh", seed=0) -> DenseNet:
    """Glorot-uniform weights and zero biases from ``np.random.default_rng(seed)``."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ConfigurationError(f"layer_sizes needs >= 2 positive widths, got {list(layer_sizes)}")
    _check_activation(hidden_activation, {"tanh"})
    _check_activation(final_activation, ACTIVATIONS)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(sizes, weights, biases, hidden_activation, final_activation)


@dataclass
class ForwardCache:
    activations: list[np.ndarray]
    vector_input: bool


def forward(net: DenseNet, x) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate ``net`` on a vector or on a batch with one sample per row."""
    x = np.asarray(x, dtype=np.float64)
    vector_input = x.ndim == 1
    a = x[None, :] if vector_input else x
    if a.ndim != 2 or a.shape[1] != net.in_dim:
        raise DimensionError(f"expected input width {net.in_dim}, got shape {x.shape}")
    acts = [a]
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = kernels.dense_forward(W, b, a, ACTIVATIONS[net.activation(i)])
        acts.append(a)
    out = a[0] if vector_input else a
    return out, ForwardCache(acts, vector_input)


def predict(net: DenseNet, x) -> np.ndarray:
    return forward(net, x)[0]


def backward(net: DenseNet, cache: ForwardCache, output_gradient):
    """Reverse-mode pass.

    Returns ``(param_grads, input_gradient)`` where ``param_grads`` follows the
    ``DenseNet.params()`` order. Batch gradients are summed over rows.
    """
    dy = np.asarray(output_gradient, dtype=np.float64)
    if cache.vector_input:
        dy = dy[None, :] if dy.ndim == 1 else dy
    acts = cache.activations
    if len(acts) != net.n_layers + 1 or dy.shape != acts[-1].shape:
        raise DimensionError(
            f"output gradient shape {np.shape(output_gradient)} does not match cached output {acts[-1].shape}"
        )
    grads = [None] * (2 * net.n_layers)
    for i in range(net.n_layers - 1, -1, -1):
        dW, db, dy = kernels.dense_backward(
            net.weights[i], acts[i], acts[i + 1], dy, ACTIVATIONS[net.activation(i)]
        )
        grads[2 * i] = dW
        grads[2 * i + 1] = db
    dx = dy[0] if cache.vector_input else dy
    return grads, dx


@dataclass
class AdamState:
    """Adam moments for one parameter list (``DenseNet.params()`` order)."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    learning_rate: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.999
    epsilon_fuzz: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_params(cls, params, learning_rate=1e-4, beta1=0.0, beta2=0.999, epsilon_fuzz=1e-8):
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        if learning_rate <= 0 or epsilon_fuzz <= 0:
            raise ConfigurationError("learning rate and fuzz must be positive")
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            float(learning_rate),
            float(beta1),
            float(beta2),
            float(epsilon_fuzz),
        )


def adam_step(state: AdamState, params, gradients) -> None:
    """Bias-corrected Adam update applied in place to ``params`` and ``state``.

    Raises :class:`NumericError` naming the parameter index (``2*layer`` for a
    weight, ``2*layer+1`` for a bias) when a gradient is not finite; nothing is
    modified in that case.
    """
    if len(params) != len(gradients) or len(params) != len(state.first_moment):
        raise DimensionError("parameter, gradient and moment lists differ in length")
    for k, (p, g) in enumerate(zip(params, gradients)):
        if p.shape != g.shape or p.shape != state.first_moment[k].shape:
            raise DimensionError(f"shape mismatch at parameter {k}: {p.shape} vs {g.shape}")
        if not kernels.all_finite(g):
            raise NumericError(f"non-finite gradient in layer {k // 2}", layer=k // 2)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    lr_t = state.learning_rate * np.sqrt(bc2) / bc1
    eps_t = state.epsilon_fuzz * np.sqrt(bc2)
    for p, g, m, v in zip(params, gradients, state.first_moment, state.second_moment):
        kernels.adam_update(p, g, m, v, state.beta1, state.beta2, lr_t, eps_t)


@dataclass
class Trainable:
    """A group of networks optimised together by a single Adam state."""

    nets: list[DenseNet]
    state: AdamState = field(default=None)
    learning_rate: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.999

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.for_params(self.params(), self.learning_rate, self.beta1, self.beta2)

    def params(self) -> list[np.ndarray]:
        out = []
        for net in self.nets:
            out.extend(net.params())
        return out

    def step(self, grads_per_net) -> None:
        flat = []
        for g in grads_per_net:
            flat.extend(g)
        adam_step(self.state, self.params(), flat)
