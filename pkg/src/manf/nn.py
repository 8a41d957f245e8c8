"""Parameter containers and small layers shared by the attention and flow code."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor


class Module:
    """Walks its attributes to enumerate parameters and buffers.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    plain ``numpy`` arrays named in ``_buffers``. Sub-modules may be stored
    directly or in lists. Enumeration order follows attribute definition
    order, so names are a pure function of the configuration.
    """

    _buffers: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "Module", str]]:
        for key in self._buffers:
            yield f"{prefix}{key}", self, key
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        T.zero_grads(self.parameters())


def glorot(rng: Rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng, bias: bool = True, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else glorot(rng, n_in, n_out)
        self.weight = T.parameter(w)
        self.bias = T.parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class FeedForward(Module):
    """Position-wise max(0, x W1 + b1) W2 + b2."""

    def __init__(self, d_model: int, d_inner: int, rng: Rng):
        self.lin1 = Linear(d_model, d_inner, rng)
        self.lin2 = Linear(d_inner, d_model, rng)

    def __call__(self, x: Tensor, rate: float = 0.0, rng: Rng | None = None,
                 training: bool = False) -> Tensor:
        h = T.relu(self.lin1(x))
        h = T.dropout(h, rate, rng, training)
        return self.lin2(h)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = T.parameter(np.ones(dim))
        self.beta = T.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def sinusoidal_table(positions: np.ndarray, dim: int) -> np.ndarray:
    """Vanilla sin/cos encoding; ``positions`` may be negative (relative offsets)."""
    positions = np.asarray(positions, dtype=np.float64)[:, None]
    half = np.arange(0, dim, 2, dtype=np.float64)
    freq = np.exp(-np.log(10000.0) * half / dim)
    table = np.zeros((positions.shape[0], dim))
    table[:, 0::2] = np.sin(positions * freq)
    table[:, 1::2] = np.cos(positions * freq)[:, : dim // 2]
    return table
