"""Parameter containers and the layers used by the encoders and planners."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..exceptions import ConfigError, InputError
from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A learnable tensor. Frozen parameters never require grad."""

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self._frozen = bool(frozen)

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.requires_grad = not self._frozen

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


class Module:
    """Minimal module tree: attribute order defines parameter order."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        item.name = f"{path}.{i}"
                        yield item.name, item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self, frozen: bool = True) -> "Module":
        for p in self.parameters():
            p.frozen = frozen
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ConfigError(
                    f"shape mismatch for {name}: checkpoint {value.shape} vs model {p.shape}")
            p.data[...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        bound = 1.0 / math.sqrt(in_dim)
        w = np.zeros((in_dim, out_dim)) if zero_init else _uniform(rng, (in_dim, out_dim), bound)
        self.weight = Parameter(w)
        if bias:
            b = np.zeros(out_dim) if zero_init else _uniform(rng, (out_dim,), bound)
            self.bias = Parameter(b)
        else:
            self.bias = None
        self.in_dim, self.out_dim = in_dim, out_dim

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise InputError(f"Linear expects last dim {self.in_dim}, got shape {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / (var + self.eps).sqrt() * self.gamma + self.beta


_ACTIVATIONS = {"gelu": T.gelu, "tanh": T.tanh, "relu": T.relu}


class MLP(Module):
    """Stack of Linear layers with an activation between them (not after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator, activation: str = "gelu",
                 zero_last: bool = False, dropout: float = 0.0,
                 dropout_rng: np.random.Generator | None = None):
        if len(dims) < 2:
            raise ConfigError("MLP needs at least input and output dims")
        n = len(dims) - 1
        self.layers = [Linear(dims[i], dims[i + 1], rng, zero_init=zero_last and i == n - 1)
                       for i in range(n)]
        self.activation = activation
        self.dropout = dropout
        self._rng = dropout_rng

    def forward(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.dropout(act(x), self.dropout, self._rng, self.training)
        return x


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1, dropout_p: float = 0.0,
              q_pos: Tensor | None = None, k_pos: Tensor | None = None,
              rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Multi-head scaled dot-product attention without projections.

    q: (..., n_q, d), k: (..., n_k, d), v: (..., n_k, d_v). Heads split the
    feature axis; scores are scaled by 1/sqrt(d_head). Positional encodings,
    when given, are added to q and k before scoring.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-1] % heads or k.shape[-1] % heads or v.shape[-1] % heads:
        raise ConfigError(
            f"feature dims {q.shape[-1]}/{k.shape[-1]}/{v.shape[-1]} not divisible by {heads} heads")
    if q.shape[-1] != k.shape[-1]:
        raise InputError(f"query/key dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise InputError(f"key/value lengths differ: {k.shape} vs {v.shape}")
    if q_pos is not None:
        if q_pos.shape != q.shape[-q_pos.ndim:]:
            raise InputError(f"q_pos shape {q_pos.shape} does not match q {q.shape}")
        q = q + q_pos
    if k_pos is not None:
        if k_pos.shape != k.shape[-k_pos.ndim:]:
            raise InputError(f"k_pos shape {k_pos.shape} does not match k {k.shape}")
        k = k + k_pos
    return _sdpa(q, k, v, heads, dropout_p, rng, training)


def _sdpa(q, k, v, heads, dropout_p, rng, training) -> Tensor:
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scale = 1.0 / math.sqrt(q.shape[-1] // heads)
    scores = (qh @ kh.swapaxes(-1, -2)) * scale
    weights = T.dropout(T.softmax(scores, axis=-1), dropout_p, rng, training)
    return _merge_heads(weights @ vh)


class MultiHeadAttention(Module):
    """Projected multi-head attention; positional encodings join q/k before projection."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, kdim: int | None = None,
                 vdim: int | None = None, dropout: float = 0.0,
                 dropout_rng: np.random.Generator | None = None):
        if dim % heads:
            raise ConfigError(f"embedding dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(kdim or dim, dim, rng)
        self.v_proj = Linear(vdim or dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)
        self.dropout = dropout
        self._rng = dropout_rng

    def forward(self, q: Tensor, k: Tensor, v: Tensor, q_pos: Tensor | None = None,
                k_pos: Tensor | None = None) -> Tensor:
        if q_pos is not None:
            q = q + q_pos
        if k_pos is not None:
            k = k + k_pos
        out = _sdpa(self.q_proj(q), self.k_proj(k), self.v_proj(v), self.heads,
                    self.dropout, self._rng, self.training)
        return self.out_proj(out)
