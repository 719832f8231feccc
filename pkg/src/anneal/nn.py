"""Minimal dense-network substrate: layers, exact backprop, Adam, and a
finite-difference gradient oracle.

Everything is float64 numpy. Networks are plain sequences of dense layers;
state (parameters, optimizer accumulators) is explicit and owned by the
caller, so separate model instances can safely be used from separate threads.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("identity", "relu", "sigmoid")


class ShapeError(ValueError):
    """Array shapes do not line up with the network definition."""


def _as_batch(x) -> tuple[np.ndarray, bool]:
    """Promote a vector to a one-row batch. Returns (2-D array, was_vector)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ShapeError(f"expected vector or matrix input, got ndim={x.ndim}")


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def apply_activation(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(kind: str, z: np.ndarray) -> np.ndarray:
    """Elementwise derivative w.r.t. the pre-activation. relu'(0) is 0."""
    if kind == "identity":
        return np.ones_like(z)
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "sigmoid":
        s = sigmoid(z)
        return s * (1.0 - s)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class DenseLayer:
    """Fully connected layer y = act(W x + b), W of shape (out, in)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError("weights must be a 2-D matrix")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weight rows "
                f"{self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


class Mlp:
    """Sequence of dense layers with chained dimensions."""

    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise ValueError("an MLP needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise ShapeError(
                    f"layer {i} expects input dim {layers[i].in_dim} but layer "
                    f"{i - 1} produces {layers[i - 1].out_dim}"
                )
        self.layers = layers

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        """Live references, ordered [W0, b0, W1, b1, ...]."""
        params = []
        for layer in self.layers:
            params.append(layer.weights)
            params.append(layer.bias)
        return params


def glorot_layer(in_dim: int, out_dim: int, activation: str,
                 rng: np.random.Generator) -> DenseLayer:
    """Uniform Glorot init, zero bias."""
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
    return DenseLayer(w, np.zeros(out_dim), activation)


def make_mlp(dims: list[int], rng: np.random.Generator,
             hidden_activation: str = "relu",
             final_activation: str = "identity") -> Mlp:
    """Build an MLP from layer widths [in, h1, ..., out]."""
    if len(dims) < 2:
        raise ValueError("dims must contain at least input and output widths")
    layers = []
    for i in range(len(dims) - 1):
        act = final_activation if i == len(dims) - 2 else hidden_activation
        layers.append(glorot_layer(dims[i], dims[i + 1], act, rng))
    return Mlp(layers)


@dataclass
class LayerTape:
    """Per-layer record from a forward pass: the layer input and the
    pre-activation, enough for exact backprop."""

    x: np.ndarray
    z: np.ndarray


def forward(mlp: Mlp, x) -> tuple[np.ndarray, list[LayerTape]]:
    """Run the network on a vector (d,) or a batch (n, d).

    Returns the output in the same rank as the input plus the tape.
    """
    h, was_vector = _as_batch(x)
    if h.shape[1] != mlp.in_dim:
        raise ShapeError(
            f"layer 0 expects input dim {mlp.in_dim}, got {h.shape[1]}"
        )
    tape = []
    for i, layer in enumerate(mlp.layers):
        if h.shape[1] != layer.in_dim:
            raise ShapeError(
                f"layer {i} expects input dim {layer.in_dim}, got {h.shape[1]}"
            )
        z = h @ layer.weights.T + layer.bias
        tape.append(LayerTape(x=h, z=z))
        h = apply_activation(layer.activation, z)
    return (h[0] if was_vector else h), tape


def backward(mlp: Mlp, tape: list[LayerTape],
             output_gradient) -> tuple[np.ndarray, list[np.ndarray]]:
    """Exact reverse pass.

    `output_gradient` is dL/d(output), shaped like the forward output.
    Returns (dL/d(input), gradients mirroring mlp.parameters()). Gradients
    are summed over the batch; divide upstream if a mean is wanted.
    """
    if len(tape) != len(mlp.layers):
        raise ShapeError("tape length does not match the network")
    g, was_vector = _as_batch(output_gradient)
    if g.shape != tape[-1].z.shape:
        raise ShapeError(
            f"output gradient shape {g.shape} does not match forward "
            f"output {tape[-1].z.shape}"
        )
    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(mlp.layers))
    for i in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[i]
        rec = tape[i]
        dz = g * activation_grad(layer.activation, rec.z)
        grads[2 * i] = dz.T @ rec.x
        grads[2 * i + 1] = dz.sum(axis=0)
        g = dz @ layer.weights
    return (g[0] if was_vector else g), grads


@dataclass
class AdamState:
    """Adam accumulators for an explicit parameter list."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie strictly in (0, 1)")
        if self.step < 0:
            raise ValueError("step must be non-negative")

    @classmethod
    def for_params(cls, params: list[np.ndarray], learning_rate: float,
                   **kwargs) -> "AdamState":
        state = cls(learning_rate=learning_rate, **kwargs)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: AdamState) -> list[np.ndarray]:
    """One bias-corrected Adam update, in place on `params`."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state must align")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter {p.shape}"
            )
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params


def cosine_similarity(a, b) -> float:
    """a.b / (|a||b|), clamped to [-1, 1].

    A zero-norm input is degenerate for cosine similarity; by decision the
    result is 0.0 and a RuntimeWarning is emitted instead of NaN.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"expected equal-length vectors, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine similarity of a zero-norm vector, returning 0.0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def rowwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity per matching row of two (n, d) matrices.

    Zero-norm rows yield 0.0 (same convention as cosine_similarity).
    """
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    ok = denom > 0.0
    if not np.all(ok):
        warnings.warn("cosine similarity of a zero-norm vector, returning 0.0",
                      RuntimeWarning, stacklevel=2)
    s = np.zeros(a.shape[0])
    s[ok] = np.einsum("ij,ij->i", a[ok], b[ok]) / denom[ok]
    return np.clip(s, -1.0, 1.0)


def finite_diff_gradient(loss_fn, params: list[np.ndarray],
                         step: float = 1e-4) -> list[np.ndarray]:
    """Central-difference gradient oracle.

    `loss_fn` is a zero-argument callable evaluated after perturbing the
    parameter arrays in place; it must be deterministic. Parameters are
    restored exactly before returning.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = float(loss_fn())
            flat[i] = orig - step
            lm = float(loss_fn())
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError("loss function returned a non-finite value")
            gflat[i] = (lp - lm) / (2.0 * step)
        grads.append(g)
    return grads
