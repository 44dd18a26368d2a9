"""Parameter storage and the handful of layers the forecasting models use."""
from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor

ACTIVATIONS = {
    "linear": lambda t: t,
    "sigmoid": ag.sigmoid,
    "softplus": ag.softplus,
    "relu": ag.relu,
    "tanh": ag.tanh,
}


class ParamStore:
    """Named parameter tensors plus Adam moment buffers and a step counter."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in self.params.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load(self, values: dict[str, np.ndarray]):
        if set(values) != set(self.params):
            missing = set(self.params) ^ set(values)
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for name, p in self.params.items():
            value = np.asarray(values[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.data.shape}")
            p.data = value.copy()

    def reset_optimizer(self):
        for name, p in self.params.items():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)
        self.step = 0


class Initializer:
    """Seeded ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; ``mode="zeros"`` gives all zeros."""

    def __init__(self, seed: int = 0, mode: str = "uniform"):
        if mode not in ("uniform", "zeros"):
            raise ValueError(f"unknown init mode {mode!r}")
        self.rng = np.random.default_rng(seed)
        self.mode = mode

    def __call__(self, shape, fan_in):
        if self.mode == "zeros":
            return np.zeros(shape)
        bound = 1.0 / math.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=shape)


class Dense:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, activation="linear",
                 init: Initializer | None = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        init = init or Initializer()
        self.n_in, self.n_out = n_in, n_out
        self.activation = activation
        self.W = store.add(f"{name}.W", init((n_in, n_out), n_in))
        self.b = store.add(f"{name}.b", init((n_out,), n_in))

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.W, self.b, self.activation)


def dense(x, W, b, activation="linear") -> Tensor:
    x = ag.as_tensor(x)
    if x.shape[-1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ValueError(f"dense shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    return ACTIVATIONS[activation](ag.matmul(x, W) + b)


class LSTM:
    def __init__(self, store: ParamStore, name: str, n_in: int, hidden: int, init: Initializer | None = None):
        init = init or Initializer()
        self.n_in, self.hidden = n_in, hidden
        self.W = store.add(f"{name}.W", init((n_in, 4 * hidden), n_in))
        self.U = store.add(f"{name}.U", init((hidden, 4 * hidden), hidden))
        self.b = store.add(f"{name}.b", init((4 * hidden,), n_in))

    def __call__(self, seq: Tensor) -> Tensor:
        seq = ag.as_tensor(seq)
        if seq.ndim != 3 or seq.shape[2] != self.n_in:
            raise ValueError(f"LSTM expects [B, T, {self.n_in}], got {seq.shape}")
        if seq.shape[1] < 1:
            raise ValueError("LSTM needs at least one timestep")
        return ag.lstm(seq, self.W, self.U, self.b)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-6):
        if eps <= 0:
            raise ValueError("layer norm eps must be positive")
        self.eps = eps
        self.gain = store.add(f"{name}.gain", np.ones(dim))
        self.bias = store.add(f"{name}.bias", np.zeros(dim))

    def __call__(self, x):
        return ag.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention:
    """Self-attention: ``softmax(Q K^T / sqrt(head_dim)) V`` per head, concatenated, projected to ``dim``.

    The key projection has no bias: a key bias adds the same amount to every
    score in a softmax row, so it cannot change the output.
    """

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int, head_dim: int,
                 init: Initializer | None = None):
        init = init or Initializer()
        self.dim, self.heads, self.head_dim = dim, heads, head_dim
        inner = heads * head_dim
        self.Wq = store.add(f"{name}.Wq", init((dim, inner), dim))
        self.bq = store.add(f"{name}.bq", init((inner,), dim))
        self.Wk = store.add(f"{name}.Wk", init((dim, inner), dim))
        self.Wv = store.add(f"{name}.Wv", init((dim, inner), dim))
        self.bv = store.add(f"{name}.bv", init((inner,), dim))
        self.Wo = store.add(f"{name}.Wo", init((inner, dim), inner))
        self.bo = store.add(f"{name}.bo", init((dim,), inner))
        self.last_weights = None

    def _split(self, t, B, T):
        return ag.transpose(ag.reshape(t, (B, T, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        x = ag.as_tensor(x)
        if x.ndim != 3 or x.shape[2] != self.dim:
            raise ValueError(f"attention expects [B, T, {self.dim}], got {x.shape}")
        B, T, _ = x.shape
        q = self._split(ag.matmul(x, self.Wq) + self.bq, B, T)
        k = self._split(ag.matmul(x, self.Wk), B, T)
        v = self._split(ag.matmul(x, self.Wv) + self.bv, B, T)
        scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        weights = ag.softmax(scores, axis=-1)
        self.last_weights = weights.data
        heads = ag.matmul(weights, v)  # (B, h, T, hd)
        merged = ag.reshape(ag.transpose(heads, (0, 2, 1, 3)), (B, T, self.heads * self.head_dim))
        return ag.matmul(merged, self.Wo) + self.bo


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, in place on ``store``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    store.step += 1
    c1 = 1.0 - beta1 ** store.step
    c2 = 1.0 - beta2 ** store.step
    for name, g in grads.items():
        p = store.params[name]
        m = store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store
