"""Small MLPs with tanh hidden layers, positional encoding, and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

OUTPUT_ACTIVATIONS = ("identity", "sigmoid")


class Mlp:
    """Fully connected net: tanh on hidden layers, configurable output head.

    Parameters are plain float64 arrays named ``<name>.W<i>`` / ``<name>.b<i>``
    so they can be swapped for tape leaves during training and round-tripped
    through the checkpoint container.
    """

    def __init__(self, widths, out_activation: str = "identity",
                 name: str = "mlp", rng: np.random.Generator | None = None):
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ShapeError(f"invalid layer widths {widths}")
        if out_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation '{out_activation}'")
        self.widths = list(widths)
        self.out_activation = out_activation
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self.weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in),
                                           (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def param_count(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.widths[:-1], self.widths[1:]))

    def zero_output_layer(self) -> None:
        """Make the net output exactly zero (pre-activation) everywhere."""
        self.weights[-1][:] = 0.0
        self.biases[-1][:] = 0.0

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.W{i}"] = w
            out[f"{self.name}.b{i}"] = b
        return out

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for i in range(self.n_layers):
            w = params[f"{self.name}.W{i}"]
            b = params[f"{self.name}.b{i}"]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ShapeError(f"checkpoint shape mismatch for {self.name} layer {i}")
            self.weights[i] = np.asarray(w, dtype=np.float64).copy()
            self.biases[i] = np.asarray(b, dtype=np.float64).copy()

    def __call__(self, x, params: dict | None = None):
        """Forward pass. `x` may be a np.ndarray (fast path) or a Tensor.

        `params` optionally maps parameter names to Tensors (tape leaves)
        or arrays, overriding the stored values.
        """
        if isinstance(x, Tensor):
            return self._forward_tape(x, params)
        return self._forward_np(np.asarray(x, dtype=np.float64), params)

    def _pick(self, params, key, default):
        if params is not None and key in params:
            return params[key]
        return default

    def _forward_np(self, x: np.ndarray, params) -> np.ndarray:
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(f"{self.name}: input width {x.shape[-1]} != {self.widths[0]}")
        h = x
        for i in range(self.n_layers):
            w = ad.value(self._pick(params, f"{self.name}.W{i}", self.weights[i]))
            b = ad.value(self._pick(params, f"{self.name}.b{i}", self.biases[i]))
            h = h @ w + b
            if i < self.n_layers - 1:
                h = np.tanh(h)
        if self.out_activation == "sigmoid":
            h = 1.0 / (1.0 + np.exp(-h))
        return h

    def _forward_tape(self, x: Tensor, params) -> Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(f"{self.name}: input width {x.shape[-1]} != {self.widths[0]}")
        h = x
        if h.data.ndim == 1:
            h = ad.reshape(h, (1, -1))
        for i in range(self.n_layers):
            w = self._pick(params, f"{self.name}.W{i}", self.weights[i])
            b = self._pick(params, f"{self.name}.b{i}", self.biases[i])
            h = ad.add(ad.matmul(h, w if isinstance(w, Tensor) else Tensor(w)),
                       b if isinstance(b, Tensor) else Tensor(b))
            if i < self.n_layers - 1:
                h = ad.tanh(h)
        if self.out_activation == "sigmoid":
            h = ad.sigmoid(h)
        if x.data.ndim == 1:
            h = ad.reshape(h, (h.shape[-1],))
        return h


def positional_encoding(x, octaves: int = 6):
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < octaves, along the last axis.

    Works on arrays and on Tensors (differentiable w.r.t. x).
    """
    if isinstance(x, Tensor):
        parts = [x]
        for k in range(octaves):
            f = (2.0 ** k) * np.pi
            parts.append(ad.sin(ad.mul(x, f)))
            parts.append(ad.cos(ad.mul(x, f)))
        return ad.concat(parts, axis=-1)
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for k in range(octaves):
        f = (2.0 ** k) * np.pi
        parts.append(np.sin(f * x))
        parts.append(np.cos(f * x))
    return np.concatenate(parts, axis=-1)


def encoded_width(dim: int, octaves: int = 6) -> int:
    return dim * (1 + 2 * octaves)


@dataclass
class AdamState:
    """First/second moments per named parameter plus hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One Adam update, in place on `params`. Missing grads are treated as 0
    (parameters without a gradient this step are left untouched)."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params
