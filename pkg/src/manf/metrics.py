"""Sample-based scores: CRPS, CRPS-sum, MSE, and naive baseline forecasters."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import ContractError, Rng


def crps_ensemble(samples, obs) -> np.ndarray:
    """CRPS of the empirical CDF of ``samples`` (sample axis 0) against ``obs``.

    Integrates ``(F(y) - 1{obs <= y})**2`` exactly over the step function:
    between consecutive sorted samples the CDF is ``i / n``, and each gap
    is split at the observation where it falls inside.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64), axis=0)
    y = np.asarray(obs, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ContractError("CRPS needs at least one sample")
    y = np.broadcast_to(y, x.shape[1:])
    p = (np.arange(1, n) / n).reshape((n - 1,) + (1,) * y.ndim)
    lo, hi = x[:-1], x[1:]
    # length of each gap lying below / above the observation
    below = np.clip(np.minimum(hi, y) - lo, 0.0, None)
    above = np.clip(hi - np.maximum(lo, y), 0.0, None)
    inner = np.sum(below * p ** 2 + above * (1 - p) ** 2, axis=0)
    left_tail = np.clip(x[0] - y, 0.0, None)     # obs left of all samples: F = 0, H = 1
    right_tail = np.clip(y - x[-1], 0.0, None)   # obs right of all samples: F = 1, H = 0
    return inner + left_tail + right_tail


def crps_energy(samples, obs) -> np.ndarray:
    """``E|X - y| - 0.5 E|X - X'|`` with the pair term evaluated on sorted samples."""
    x = np.sort(np.asarray(samples, dtype=np.float64), axis=0)
    y = np.asarray(obs, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ContractError("CRPS needs at least one sample")
    term1 = np.mean(np.abs(x - y), axis=0)
    w = (2 * np.arange(n) - n + 1).reshape((n,) + (1,) * (x.ndim - 1))
    pair = 2.0 * np.sum(w * x, axis=0) / (n * n)
    return term1 - 0.5 * pair


def crps_samples(samples, x: float) -> float:
    """Scalar CRPS of a 1-D sample set against one observation."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    return float(crps_ensemble(samples, x))


def crps_sum(samples, obs, normalized: bool = False) -> float:
    """CRPS of the cross-series sum, averaged over time steps.

    ``samples`` is (n, k, D) or (W, n, k, D) for W windows; ``obs`` matches
    without the sample axis.
    """
    samples = np.asarray(samples, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if samples.ndim == 3:
        samples, obs = samples[None], obs[None]
    if samples.shape[:1] + samples.shape[2:] != obs.shape:
        raise ContractError(f"samples {samples.shape} and observations {obs.shape} disagree")
    s_sum = samples.sum(axis=-1)              # (W, n, k)
    o_sum = obs.sum(axis=-1)                  # (W, k)
    scores = crps_ensemble(np.moveaxis(s_sum, 1, 0), o_sum)
    value = float(scores.mean())
    if normalized:
        denom = float(np.abs(o_sum).mean())
        value = value / denom if denom > 0 else value
    return value


def mse(samples, obs) -> float:
    """Mean squared error of the sample mean."""
    samples = np.asarray(samples, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    axis = 1 if samples.ndim == 4 else 0   # (W, n, k, D) carries windows first
    point = samples.mean(axis=axis)
    if point.shape != obs.shape:
        raise ContractError(f"samples {samples.shape} and observations {obs.shape} disagree")
    return float(np.mean((point - obs) ** 2))


def per_series_crps(samples, obs) -> np.ndarray:
    """Mean marginal CRPS per series; accepts (n, k, D) or (W, n, k, D)."""
    samples = np.asarray(samples, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if samples.ndim == 3:
        samples, obs = samples[None], obs[None]
    scores = crps_ensemble(np.moveaxis(samples, 1, 0), obs)   # (W, k, D)
    return scores.mean(axis=(0, 1))


@dataclass
class ScoreReport:
    crps_sum: float
    mse: float
    per_series_crps: list[float] = field(default_factory=list)
    n_samples: int = 0
    windows: int = 0

    def __post_init__(self):
        vals = [self.crps_sum, self.mse, *self.per_series_crps]
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"scores must be finite and nonnegative: {vals}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_series_crps"] = [float(v) for v in self.per_series_crps]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def score(samples, obs, normalized: bool = False) -> ScoreReport:
    """Report for (W, n, k, D) samples against (W, k, D) observations."""
    samples = np.asarray(samples, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if samples.ndim == 3:
        samples, obs = samples[None], obs[None]
    return ScoreReport(
        crps_sum=crps_sum(samples, obs, normalized),
        mse=mse(samples, obs),
        per_series_crps=[float(v) for v in per_series_crps(samples, obs)],
        n_samples=int(samples.shape[1]),
        windows=int(samples.shape[0]),
    )


def baseline_forecast(kind: str, context, horizon: int, n: int, rng: Rng,
                      mask=None) -> np.ndarray:
    """Naive sample forecasts of shape (n, horizon, D) from a (L, D) context.

    ``persistence`` repeats the last observed value plus a bootstrap draw of
    one-step context differences; ``climatology`` resamples observed
    context values per series.
    """
    context = np.asarray(context, dtype=np.float64)
    if context.ndim == 1:
        context = context[:, None]
    L, D = context.shape
    mask = np.ones(context.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    out = np.empty((n, horizon, D))
    for d in range(D):
        obs = context[mask[:, d], d]
        if obs.size == 0:
            obs = np.zeros(1)
        if kind == "climatology":
            out[:, :, d] = obs[rng.integers(0, obs.size, size=(n, horizon))]
        elif kind == "persistence":
            resid = np.diff(obs) if obs.size > 1 else np.zeros(1)
            out[:, :, d] = obs[-1] + resid[rng.integers(0, resid.size, size=(n, horizon))]
        else:
            raise ValueError(f"unknown baseline {kind!r}; expected persistence or climatology")
    return out
