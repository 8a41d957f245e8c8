"""
Multi-scale windowed attention with relative positions.

Scores for query ``i`` against key ``j`` inside the window ``|i - j| <= theta``
combine a content term and a position term, each biased by a per-head
learnable vector::

    score_ij = ((q_i + u)^T W_k k_j + (q_i + v)^T W_k R_{i-j}) / sqrt(m)

``R`` is a fixed sinusoidal table over signed offsets, projected per layer by
a learnable matrix. Windows are clamped at the sequence edges. The encoder
stacks layers with nondecreasing half-windows; the decoder layers use plain
multi-head cross-attention over the encoder output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import tensor as T
from .nn import FeedForward, LayerNorm, Linear, Module, glorot, sinusoidal_table
from .tensor import ContractError, DimensionError, Rng, Tensor
from .tensor import _unbroadcast as _unbroadcast_like


class TableSizeError(IndexError):
    """A relative offset falls outside the position table."""


@dataclass
class ScaleSet:
    """Half-window per encoder layer, smallest first."""

    half_windows: list[int] = field(default_factory=list)

    def __post_init__(self):
        hw = [int(h) for h in self.half_windows]
        if not hw or any(h < 0 for h in hw):
            raise ValueError(f"half windows must be nonnegative integers, got {self.half_windows}")
        if any(b < a for a, b in zip(hw, hw[1:])):
            raise ValueError(f"scale set must be nondecreasing, got {hw}")
        self.half_windows = hw

    @classmethod
    def default(cls, horizon: int, n_layers: int = 3) -> "ScaleSet":
        """``ceil(L / (n - i))`` for layer ``i``; gives [L/3, L/2, L] for three layers.

        ``L`` is four times the horizon.
        """
        L = 4 * horizon
        return cls([math.ceil(L / (n_layers - i)) for i in range(n_layers)])

    def __len__(self):
        return len(self.half_windows)

    def __iter__(self):
        return iter(self.half_windows)

    def __getitem__(self, i):
        return self.half_windows[i]


def window(x, i: int, theta: int):
    """Rows ``max(0, i - theta) .. min(T - 1, i + theta)`` of ``x``."""
    n = len(x)
    if not 0 <= i < n:
        raise IndexError(f"window centre {i} outside sequence of length {n}")
    return x[max(0, i - theta): min(n - 1, i + theta) + 1]


def window_mask(n: int, theta: int) -> np.ndarray | None:
    """Boolean (n, n) band mask, or None when the window covers everything."""
    if theta >= n - 1:
        return None
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :]) <= theta


def rel_scores(q_i, K_win, R_offsets, u, v, W_k, scale: float = 1.0) -> np.ndarray:
    """Scores of one query against its windowed keys (single head, plain numpy).

    ``R_offsets[j]`` must hold the position vector for offset ``i - j`` of
    key ``j``.
    """
    q_i = np.asarray(q_i, dtype=float)
    qu = q_i + u
    qv = q_i + v
    content = np.asarray(K_win) @ W_k.T @ qu
    position = np.asarray(R_offsets) @ W_k.T @ qv
    return (content + position) * scale


def _shifted_view(x: np.ndarray) -> np.ndarray:
    """View ``v[..., i, j] = x[..., i, i - j + n - 1]`` of a (..., n, 2n-1) array."""
    n = x.shape[-2]
    st = x.strides
    base = x[..., n - 1:]
    return as_strided(base, shape=x.shape[:-1] + (n,),
                      strides=st[:-2] + (st[-2] + st[-1], -st[-1]), writeable=False)


def rel_shift(x: Tensor) -> Tensor:
    """Map per-offset scores (..., n, 2n-1) to pairwise scores (..., n, n).

    ``out[..., i, j] = x[..., i, i - j + n - 1]``. Each input entry is read at
    most once, so the backward pass is a plain scatter.
    """
    n = x.shape[-2]
    if x.shape[-1] != 2 * n - 1:
        raise DimensionError(f"rel_shift expects last dim {2 * n - 1}, got {x.shape}")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        view = as_strided(full[..., n - 1:], shape=g.shape,
                          strides=full.strides[:-2] + (full.strides[-2] + full.strides[-1], -full.strides[-1]))
        view[...] = g
        return (full,)

    return Tensor._from_op(_shifted_view(np.ascontiguousarray(x.data)).copy(), (x,), backward)


def add_rel_shift(content: Tensor, offsets: Tensor) -> Tensor:
    """``content + rel_shift(offsets)`` in a single pass."""
    n = offsets.shape[-2]
    if offsets.shape[-1] != 2 * n - 1 or content.shape[-1] != n:
        raise DimensionError(f"incompatible shapes {content.shape} and {offsets.shape}")
    off = np.ascontiguousarray(offsets.data)
    out = content.data + _shifted_view(off)
    shape, cshape = off.shape, content.shape

    def backward(g):
        gc = _unbroadcast_like(g, cshape)
        full = np.zeros(shape)
        view = as_strided(full[..., n - 1:], shape=g.shape,
                          strides=full.strides[:-2] + (full.strides[-2] + full.strides[-1], -full.strides[-1]))
        view[...] = g
        return gc, full

    return Tensor._from_op(out, (content, offsets), backward)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, n, d = x.shape
    return x.reshape(B, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, n, m = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, n, H * m)


class MultiScaleAttention(Module):
    """Windowed multi-head attention with per-layer relative positions.

    Parameters
    ----------
    d_model : int
        Hidden width; must be divisible by ``heads``.
    heads : int
        Number of attention heads.
    max_offset : int
        Largest ``|i - j|`` the position table supports.
    raw_scores : bool
        Skip the softmax and use the masked scores directly as weights.
    scale_scores : bool
        Divide scores by ``sqrt(d_model / heads)``.
    """

    def __init__(self, d_model: int, heads: int, max_offset: int, rng: Rng,
                 raw_scores: bool = False, scale_scores: bool = True):
        if d_model % heads:
            raise ContractError(f"hidden dim {d_model} not divisible by {heads} heads")
        self.d_model, self.heads, self.head_dim = d_model, heads, d_model // heads
        self.max_offset = max_offset
        self.raw_scores, self.scale_scores = raw_scores, scale_scores
        m = self.head_dim
        self.wq = Linear(d_model, d_model, rng, bias=False)
        self.wk = Linear(d_model, d_model, rng, bias=False)
        self.wv = Linear(d_model, d_model, rng, bias=False)
        self.wo = Linear(d_model, d_model, rng, bias=False)
        self.w_pos_key = T.parameter(np.stack([np.eye(m) + glorot(rng, m, m) * 0.1 for _ in range(heads)]))
        self.w_rel = T.parameter(glorot(rng, d_model, d_model))
        self.u = T.parameter(np.zeros((heads, m)))
        self.v = T.parameter(np.zeros((heads, m)))
        self.rel_table = sinusoidal_table(np.arange(-max_offset, max_offset + 1), d_model)

    def relative_positions(self, n: int) -> Tensor:
        """Projected position vectors for offsets ``-(n-1) .. n-1``, shape (H, 2n-1, m)."""
        if n - 1 > self.max_offset:
            raise TableSizeError(f"sequence length {n} needs offset {n - 1} > table size {self.max_offset}")
        lo = self.max_offset - (n - 1)
        base = Tensor(self.rel_table[lo: lo + 2 * n - 1])
        proj = base @ self.w_rel
        return proj.reshape(2 * n - 1, self.heads, self.head_dim).transpose(1, 0, 2)

    def scores(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Unmasked pairwise scores (B, H, n, n) and values (B, H, n, m)."""
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        n = x.shape[1]
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(x), self.heads)
        val = _split_heads(self.wv(x), self.heads)
        wkt = T.swapaxes(self.w_pos_key, -1, -2)
        kw = k @ wkt
        rw = self.relative_positions(n) @ wkt
        scale = 1.0 / math.sqrt(self.head_dim) if self.scale_scores else 1.0
        qu = (q + self.u.reshape(self.heads, 1, self.head_dim)) * scale
        qv = (q + self.v.reshape(self.heads, 1, self.head_dim)) * scale
        content = qu @ T.swapaxes(kw, -1, -2)
        return add_rel_shift(content, qv @ T.swapaxes(rw, -1, -2)), val

    def weights(self, x: Tensor, theta: int) -> Tensor:
        s, _ = self.scores(x)
        mask = window_mask(s.shape[-1], theta)
        if self.raw_scores:
            return s if mask is None else T.where(mask, s, 0.0)
        return T.softmax(s, axis=-1, mask=mask)

    def __call__(self, x: Tensor, theta: int) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        s, val = self.scores(x)
        mask = window_mask(x.shape[1], theta)
        if self.raw_scores:
            w = s if mask is None else T.where(mask, s, 0.0)
        else:
            w = T.softmax(s, axis=-1, mask=mask)
        out = self.wo(_merge_heads(w @ val))
        return out.reshape(*out.shape[1:]) if squeeze else out


class MSTransformerLayer(Module):
    """``O = LayerNorm(H + ReLU(A(H, theta)))``; output ``FFN(O)``."""

    def __init__(self, d_model: int, heads: int, d_ff: int, max_offset: int, rng: Rng,
                 dropout: float = 0.0, raw_scores: bool = False, scale_scores: bool = True):
        self.attn = MultiScaleAttention(d_model, heads, max_offset, rng, raw_scores, scale_scores)
        self.norm = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, theta: int, rng: Rng | None = None, training: bool = False) -> Tensor:
        a = T.dropout(self.attn(x, theta), self.dropout, rng, training)
        o = self.norm(x + T.relu(a))
        return self.ffn(o, self.dropout, rng, training)


class Encoder(Module):
    """Stack of multi-scale layers applied in scale-set order."""

    def __init__(self, d_model: int, heads: int, d_ff: int, scales: ScaleSet, max_offset: int,
                 rng: Rng, dropout: float = 0.0, raw_scores: bool = False, scale_scores: bool = True):
        self.scales = ScaleSet(list(scales))
        self.layers = [MSTransformerLayer(d_model, heads, d_ff, max_offset, rng, dropout,
                                          raw_scores, scale_scores) for _ in self.scales]

    def __call__(self, x: Tensor, rng: Rng | None = None, training: bool = False) -> Tensor:
        return encoder_forward(x, self.scales, self.layers, rng, training)


def encoder_forward(x: Tensor, scales: ScaleSet, layers: list[MSTransformerLayer],
                    rng: Rng | None = None, training: bool = False) -> Tensor:
    if len(layers) != len(scales):
        raise ContractError(f"{len(layers)} layers for {len(scales)} scales")
    h = x
    for theta, layer in zip(scales, layers):
        h = layer(h, theta, rng, training)
    return h


class CrossAttention(Module):
    """Standard multi-head attention of queries over a memory sequence."""

    def __init__(self, d_model: int, heads: int, rng: Rng):
        if d_model % heads:
            raise ContractError(f"hidden dim {d_model} not divisible by {heads} heads")
        self.heads, self.head_dim = heads, d_model // heads
        self.wq = Linear(d_model, d_model, rng, bias=False)
        self.wk = Linear(d_model, d_model, rng, bias=False)
        self.wv = Linear(d_model, d_model, rng, bias=False)
        self.wo = Linear(d_model, d_model, rng, bias=False)

    def __call__(self, q: Tensor, mem: Tensor) -> Tensor:
        qh = _split_heads(self.wq(q), self.heads) * (1.0 / math.sqrt(self.head_dim))
        kh = _split_heads(self.wk(mem), self.heads)
        vh = _split_heads(self.wv(mem), self.heads)
        w = T.softmax(qh @ T.swapaxes(kh, -1, -2), axis=-1)
        return self.wo(_merge_heads(w @ vh))


class CrossAttentionLayer(Module):
    """Decoder layer: queries (plus optional sinusoidal PE) attend to the encoder output.

    Residual, ReLU and LayerNorm placement mirror :class:`MSTransformerLayer`.
    """

    def __init__(self, d_model: int, heads: int, d_ff: int, rng: Rng, dropout: float = 0.0):
        self.attn = CrossAttention(d_model, heads, rng)
        self.norm = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, mem: Tensor, pe: np.ndarray | Tensor | None = None,
                 rng: Rng | None = None, training: bool = False) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
            mem = mem.reshape(1, *mem.shape)
        if pe is not None:
            x = x + pe
        a = T.dropout(self.attn(x, mem), self.dropout, rng, training)
        o = self.norm(x + T.relu(a))
        out = self.ffn(o, self.dropout, rng, training)
        return out.reshape(*out.shape[1:]) if squeeze else out


def positional_encoding(k: int, d_model: int) -> np.ndarray:
    """Sinusoidal absolute encoding for prediction positions ``0 .. k-1``."""
    return sinusoidal_table(np.arange(k), d_model)
