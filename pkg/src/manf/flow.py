"""
Conditional normalizing-flow bijections.

The generative direction maps a standard normal draw ``z0`` to a target
vector through ``[coupling_1, bn_1, coupling_2, bn_2, ...]``. The density
direction runs the same stack backwards. Each coupling is conditioned on
one decoder hidden state (after a linear conditioner head).

Two conditioning modes are supported:

``coupling``
    ``out[trans] = z[trans] * exp(s([z[kept]; c])) + t([z[kept]; c])`` with the
    kept / transformed split alternating between even and odd dimensions.
``elementwise``
    Every dimension is transformed by ``exp(s(c))`` and ``t(c)`` only.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import ContractError, Rng, Tensor

LOG_2PI = math.log(2.0 * math.pi)


class NumericError(FloatingPointError):
    """Non-finite value produced inside the model."""


class SingularBijectionError(ValueError):
    """A bijection with zero scale has no inverse."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


class CouplingLayer(Module):
    """Affine coupling conditioned on an external vector.

    Parameters
    ----------
    dim : int
        Target dimension D.
    cond_dim : int
        Width of the conditioning vector.
    parity : int
        0 keeps even dimensions and transforms odd ones; 1 the reverse.
    hidden : int
        Width of the two-layer s and t networks.
    scale_clamp : float or None
        If set, ``s = c * tanh(raw / c)`` bounds the log-scale to ``[-c, c]``.
    conditioning : {"coupling", "elementwise"}
    index : int
        Position in the stack, reported in numeric errors.
    """

    def __init__(self, dim: int, cond_dim: int, rng: Rng, parity: int = 0, hidden: int = 100,
                 scale_clamp: float | None = 2.0, conditioning: str = "coupling", index: int = 0):
        if conditioning not in ("coupling", "elementwise"):
            raise ValueError(f"unknown conditioning mode {conditioning!r}")
        self.dim, self.cond_dim, self.parity = dim, cond_dim, parity
        self.conditioning, self.scale_clamp, self.index = conditioning, scale_clamp, index
        idx = np.arange(dim)
        if conditioning == "elementwise" or dim == 1:
            self.kept = np.arange(0)
            self.trans = idx
        else:
            self.kept = idx[idx % 2 == parity]
            self.trans = idx[idx % 2 != parity]
        self.inv_perm = np.argsort(np.concatenate([self.kept, self.trans]))
        n_in = len(self.kept) + cond_dim
        n_out = len(self.trans)
        if n_in == 0:
            raise ContractError("coupling layer has neither kept dimensions nor a condition")
        self.s_hidden = Linear(n_in, hidden, rng)
        self.s_out = Linear(hidden, n_out, rng, zero=True)
        self.t_hidden = Linear(n_in, hidden, rng)
        self.t_out = Linear(hidden, n_out, rng, zero=True)

    @property
    def split_index(self) -> int:
        return len(self.kept)

    def scale_shift(self, z_kept: Tensor | None, cond) -> tuple[Tensor, Tensor]:
        parts = [] if z_kept is None else [z_kept]
        if self.cond_dim:
            parts.append(T._t(cond))
        inp = parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)
        raw = self.s_out(T.relu(self.s_hidden(inp)))
        shift = self.t_out(T.relu(self.t_hidden(inp)))
        if self.scale_clamp is not None:
            c = self.scale_clamp
            raw = T.tanh(raw * (1.0 / c)) * c
        _check_finite(raw.data, f"scale net of coupling {self.index}")
        _check_finite(shift.data, f"shift net of coupling {self.index}")
        return raw, shift

    def _split(self, z: Tensor) -> tuple[Tensor | None, Tensor]:
        kept = T.take(z, self.kept, axis=-1) if len(self.kept) else None
        return kept, T.take(z, self.trans, axis=-1)

    def _join(self, kept: Tensor | None, trans: Tensor) -> Tensor:
        if kept is None:
            return trans
        return T.take(T.concat([kept, trans], axis=-1), self.inv_perm, axis=-1)

    def forward(self, z, cond) -> tuple[Tensor, Tensor]:
        """Generative direction; returns (output, log|det| per row)."""
        z = T._t(z)
        kept, trans = self._split(z)
        s, t = self.scale_shift(kept, cond)
        out = self._join(kept, trans * T.exp(s) + t)
        return out, s.sum(axis=-1)

    def inverse(self, y, cond) -> tuple[Tensor, Tensor]:
        """Density direction; returns (input, log|det| of the inverse per row)."""
        y = T._t(y)
        kept, trans = self._split(y)
        s, t = self.scale_shift(kept, cond)
        out = self._join(kept, (trans - t) * T.exp(-s))
        return out, -s.sum(axis=-1)


class BNBijection(Module):
    """Batch normalization used as an invertible layer.

    ``normalize`` maps ``x`` to ``gamma * (x - mu) / sqrt(var + eps) + beta``
    using batch statistics in training mode (and updating running averages)
    or the running averages otherwise. ``gamma`` is stored as its logarithm
    so it stays positive during training.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5):
        self.dim, self.momentum, self.eps = dim, momentum, eps
        self.log_gamma = T.parameter(np.zeros(dim))
        self.beta = T.parameter(np.zeros(dim))
        # running_var + eps == 1 exactly, so a fresh layer is the identity in eval mode
        self.running_mean = np.zeros(dim)
        self.running_var = np.full(dim, 1.0 - eps)
        self._batch_stats: tuple[Tensor, Tensor] | None = None

    @property
    def gamma(self) -> np.ndarray:
        return np.exp(self.log_gamma.data)

    def set_gamma(self, gamma) -> None:
        gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (self.dim,))
        if np.any(gamma == 0):
            raise SingularBijectionError("gamma = 0 makes the batch-norm bijection singular")
        if np.any(gamma < 0):
            raise ValueError("negative gamma is not representable (log parameterization)")
        self.log_gamma.data = np.log(gamma).copy()

    def _stats(self, x: Tensor, training: bool, update: bool) -> tuple[Tensor, Tensor]:
        if not training:
            return Tensor(self.running_mean), Tensor(self.running_var)
        if x.shape[0] < 2:
            raise ContractError("training-mode batch norm needs at least 2 rows")
        mu = T.mean(x, axis=0)
        v = T.var(x, axis=0)
        if update:
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mu.data
            self.running_var = m * self.running_var + (1 - m) * v.data
        self._batch_stats = (mu, v)
        return mu, v

    def _logdet(self, v: Tensor, n: int) -> Tensor:
        per_dim = self.log_gamma - 0.5 * T.log(v + self.eps)
        return T.broadcast_to(per_dim.sum(), (n,))

    def normalize(self, x, training: bool = False, update: bool = True) -> tuple[Tensor, Tensor]:
        x = T._t(x)
        mu, v = self._stats(x, training, update)
        y = (x - mu) / T.sqrt(v + self.eps) * T.exp(self.log_gamma) + self.beta
        return y, self._logdet(v, x.shape[0])

    def denormalize(self, y, training: bool = False) -> tuple[Tensor, Tensor]:
        """Inverse of :meth:`normalize` with the statistics it last used."""
        y = T._t(y)
        if training:
            if self._batch_stats is None:
                raise ContractError("training-mode inverse needs a preceding forward pass")
            mu, v = self._batch_stats
        else:
            mu, v = Tensor(self.running_mean), Tensor(self.running_var)
        x = (y - self.beta) * T.exp(-self.log_gamma) * T.sqrt(v + self.eps) + mu
        return x, -self._logdet(v, y.shape[0])


def bn_forward(x, bij: BNBijection, training: bool = False):
    return bij.normalize(x, training)


def bn_inverse(y, bij: BNBijection, training: bool = False):
    return bij.denormalize(y, training)


def coupling_forward(z, cond, layer: CouplingLayer):
    return layer.forward(z, cond)


def coupling_inverse(y, cond, layer: CouplingLayer):
    return layer.inverse(y, cond)


def standard_normal_logpdf(z: Tensor) -> Tensor:
    d = z.shape[-1]
    return (z * z).sum(axis=-1) * -0.5 - 0.5 * d * LOG_2PI


class FlowStack(Module):
    """Alternating couplings and batch-norm bijections over a D-dim target."""

    def __init__(self, dim: int, cond_dim: int, n_couplings: int, rng: Rng, hidden: int = 100,
                 scale_clamp: float | None = 2.0, conditioning: str = "coupling",
                 batch_norm: bool = True, bn_momentum: float = 0.9, bn_eps: float = 1e-5):
        self.dim, self.cond_dim = dim, cond_dim
        self.couplings = [CouplingLayer(dim, cond_dim, rng, parity=i % 2, hidden=hidden,
                                        scale_clamp=scale_clamp, conditioning=conditioning, index=i)
                          for i in range(n_couplings)]
        self.norms = [BNBijection(dim, bn_momentum, bn_eps) for _ in range(n_couplings)] if batch_norm else []

    def __len__(self):
        return len(self.couplings)

    def bijections(self) -> list[Module]:
        """Generative order."""
        out: list[Module] = []
        for i, c in enumerate(self.couplings):
            out.append(c)
            if self.norms:
                out.append(self.norms[i])
        return out

    def _check_conds(self, conds: Sequence) -> None:
        if len(conds) != len(self.couplings):
            raise ContractError(f"{len(conds)} conditions for {len(self.couplings)} couplings")

    def to_base(self, x, conds: Sequence, training: bool = False,
                trace: list | None = None) -> tuple[Tensor, Tensor]:
        """Density direction ``x -> z0``; returns (z0, summed log|det|)."""
        self._check_conds(conds)
        h = T._t(x)
        total = None
        for i in reversed(range(len(self.couplings))):
            if self.norms:
                h, ld = self.norms[i].normalize(h, training)
                total = ld if total is None else total + ld
                if trace is not None:
                    trace.append(ld)
            h, ld = self.couplings[i].inverse(h, conds[i])
            total = ld if total is None else total + ld
            if trace is not None:
                trace.append(ld)
        return h, total

    def from_base(self, z, conds: Sequence, training: bool = False) -> tuple[Tensor, Tensor]:
        """Generative direction ``z0 -> x``; returns (x, summed log|det|)."""
        self._check_conds(conds)
        h = T._t(z)
        total = None
        for i, coupling in enumerate(self.couplings):
            h, ld = coupling.forward(h, conds[i])
            total = ld if total is None else total + ld
            if self.norms:
                h, ld = self.norms[i].denormalize(h, training)
                total = total + ld
        return h, total

    def log_prob(self, x, conds: Sequence, training: bool = False, trace: list | None = None) -> Tensor:
        return flow_log_prob(x, conds, self, training, trace)


def flow_log_prob(x, conds: Sequence, stack: FlowStack, training: bool = False,
                  trace: list | None = None) -> Tensor:
    """Exact log-density of each row of ``x`` (shape (N, D)) under the stack."""
    z, logdet = stack.to_base(x, conds, training, trace)
    out = standard_normal_logpdf(z) + logdet
    _check_finite(out.data, "flow log-probability")
    return out


def flow_sample(rng: Rng, conds: Sequence, stack: FlowStack, n: int) -> np.ndarray:
    """Draw ``n`` samples for each condition row.

    ``conds[i]`` has shape (M, C) (or (C,) for M = 1). Returns (n, M, D).
    """
    if n <= 0:
        raise ContractError(f"number of samples must be positive, got {n}")
    stack._check_conds(conds)
    arrs = [np.atleast_2d(T._t(c).data) for c in conds]
    m = arrs[0].shape[0]
    z0 = rng.normal((n, m, stack.dim)).reshape(n * m, stack.dim)
    tiled = [np.broadcast_to(a, (n, m, a.shape[-1])).reshape(n * m, a.shape[-1]) for a in arrs]
    with T.no_grad():
        x, _ = stack.from_base(z0, tiled, training=False)
    return x.data.reshape(n, m, stack.dim)
