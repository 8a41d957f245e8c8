"""
Series ingestion, windowing, covariates, mean scaling, corruption and mixup.

A :class:`SeriesFrame` holds a regularly sampled ``T x D`` value matrix plus
an observed mask. Windows cut from it are mean-scaled per series using the
observed context entries; unobserved context cells are zero-filled after
scaling and flagged through a mask channel.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import Rng

FREQS = {"30min": np.timedelta64(30, "m"), "H": np.timedelta64(60, "m"), "D": np.timedelta64(1440, "m")}
FREQ_ALIASES = {"30min": "30min", "30-min": "30min", "30T": "30min", "h": "H", "H": "H",
                "hourly": "H", "1H": "H", "D": "D", "d": "D", "daily": "D", "1D": "D"}
SCALE_FLOOR = 1e-8


class FormatError(ValueError):
    """Malformed CSV input."""


class EmptyDataError(ValueError):
    """A frame with no series."""


class CoverageError(ValueError):
    """Series too short for the requested windows."""


def normalize_freq(freq: str) -> str:
    try:
        return FREQ_ALIASES[freq]
    except KeyError:
        raise ValueError(f"unsupported frequency {freq!r}; expected 30min, H or D") from None


@dataclass
class SeriesFrame:
    """Regular multivariate series with an observed mask."""

    values: np.ndarray
    start: np.datetime64
    freq: str = "H"
    observed_mask: np.ndarray | None = None
    categories: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[1] == 0:
            raise EmptyDataError("frame has no series")
        self.freq = normalize_freq(self.freq)
        self.start = np.datetime64(self.start, "m")
        if self.observed_mask is None:
            self.observed_mask = np.ones(self.values.shape, dtype=bool)
        self.observed_mask = np.asarray(self.observed_mask, dtype=bool)
        if np.any(~np.isfinite(self.values)):
            raise FormatError("values must be finite; encode missing cells in observed_mask")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]

    @property
    def step(self) -> np.timedelta64:
        return FREQS[self.freq]

    def timestamps(self, lo: int = 0, hi: int | None = None) -> np.ndarray:
        hi = self.T if hi is None else hi
        return self.start + np.arange(lo, hi) * self.step

    def scaled(self, c: float) -> "SeriesFrame":
        return replace(self, values=self.values * c)

    def slice(self, lo: int, hi: int) -> "SeriesFrame":
        return SeriesFrame(self.values[lo:hi], self.start + lo * self.step, self.freq,
                           self.observed_mask[lo:hi], self.categories)

    def properties(self) -> str:
        return f"dimension={self.D} freq={self.freq} total_steps={self.T}"


def _freq_from_step(step: np.timedelta64, row: int) -> str:
    for name, delta in FREQS.items():
        if step == delta:
            return name
    raise FormatError(f"row {row}: unsupported sampling interval {step}")


def load_csv(path) -> SeriesFrame:
    """Read ``timestamp,series_0,...`` with empty cells as missing."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if not header or header[0] != "timestamp":
            raise FormatError(f"{path}: first column must be 'timestamp'")
        d = len(header) - 1
        if d == 0:
            raise EmptyDataError(f"{path}: no series columns")
        stamps, rows, mask = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != d + 1:
                raise FormatError(f"row {lineno}: expected {d + 1} fields, got {len(rec)}")
            try:
                stamps.append(np.datetime64(rec[0], "m"))
            except ValueError:
                raise FormatError(f"row {lineno}: bad timestamp {rec[0]!r}") from None
            vals = [float(c) if c.strip() else 0.0 for c in rec[1:]]
            rows.append(vals)
            mask.append([bool(c.strip()) for c in rec[1:]])
    if not rows:
        raise FormatError(f"{path}: no data rows")
    stamps = np.array(stamps)
    freq = "H"
    if len(stamps) > 1:
        diffs = np.diff(stamps)
        freq = _freq_from_step(diffs[0], 3)
        bad = np.nonzero(diffs != diffs[0])[0]
        if bad.size:
            raise FormatError(f"row {bad[0] + 3}: irregular timestamp {stamps[bad[0] + 1]}")
    return SeriesFrame(np.array(rows), stamps[0], freq, np.array(mask))


def _fmt_stamp(ts: np.datetime64) -> str:
    return str(np.datetime64(ts, "m")) + ":00"


def write_csv(frame: SeriesFrame, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp"] + [f"series_{i}" for i in range(frame.D)])
        for ts, row, m in zip(frame.timestamps(), frame.values, frame.observed_mask):
            w.writerow([_fmt_stamp(ts)] + [repr(float(v)) if ok else "" for v, ok in zip(row, m)])


# ---------------------------------------------------------------------------
# covariates
# ---------------------------------------------------------------------------

def calendar_fields(stamps: np.ndarray) -> dict[str, np.ndarray]:
    stamps = np.asarray(stamps, dtype="datetime64[m]")
    days = stamps.astype("datetime64[D]")
    months = stamps.astype("datetime64[M]")
    minutes_in_day = (stamps - days).astype(np.int64)
    return {
        "minute": minutes_in_day % 60,
        "hour": minutes_in_day // 60,
        "dow": (days.astype(np.int64) + 3) % 7,  # 1970-01-01 was a Thursday; Monday = 0
        "dom": (days - months).astype(np.int64) + 1,
        "month": months.astype(np.int64) % 12,
    }


def n_time_features(freq: str) -> int:
    return 4 if normalize_freq(freq) == "30min" else 3


def time_features(frame: SeriesFrame, lo: int = 0, hi: int | None = None) -> np.ndarray:
    """Calendar covariates in [-0.5, 0.5] for rows ``lo:hi``."""
    return time_features_for(frame.timestamps(lo, hi), frame.freq)


def time_features_for(stamps: np.ndarray, freq: str) -> np.ndarray:
    f = calendar_fields(stamps)
    hour = f["hour"] / 23.0 - 0.5
    dow = f["dow"] / 6.0 - 0.5
    dom = (f["dom"] - 1) / 30.0 - 0.5
    month = f["month"] / 11.0 - 0.5
    freq = normalize_freq(freq)
    if freq == "D":
        cols = [dow, dom, month]
    elif freq == "H":
        cols = [hour, dow, dom]
    else:
        cols = [f["minute"] / 59.0 - 0.5, hour, dow, dom]
    return np.stack(cols, axis=-1).astype(np.float64)


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

def mean_scale(context: np.ndarray, future: np.ndarray | None = None,
               mask: np.ndarray | None = None):
    """Divide each series by the mean absolute value of its observed context.

    ``context`` has time on axis -2 and series on axis -1. Means below 1e-8
    fall back to 1. Returns ``(scaled_context, scaled_future, means)``.
    """
    context = np.asarray(context, dtype=np.float64)
    if mask is None:
        mask = np.ones(context.shape, dtype=bool)
    count = mask.sum(axis=-2)
    total = np.where(mask, np.abs(context), 0.0).sum(axis=-2)
    means = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    means = np.where(np.abs(means) < SCALE_FLOOR, 1.0, means)
    scaled = np.where(mask, context / means[..., None, :], 0.0)
    scaled_future = None if future is None else np.asarray(future) / means[..., None, :]
    return scaled, scaled_future, means


def unscale(samples: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Multiply scaled values back; ``means`` broadcasts over the trailing series axis."""
    return np.asarray(samples) * np.asarray(means)[..., None, :]


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

@dataclass
class WindowBatch:
    """Mean-scaled model inputs for B windows.

    ``context`` (B, L, D), ``context_mask`` (B, L, D), ``context_covs``
    (B, L, C), ``future_covs`` (B, k, C), ``future`` (B, k, D) or None,
    ``means`` (B, D). ``starts`` are the first context row of each window.
    """

    context: np.ndarray
    context_mask: np.ndarray
    context_covs: np.ndarray
    future_covs: np.ndarray
    future: np.ndarray | None
    means: np.ndarray
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return self.context.shape[0]

    @property
    def horizon(self) -> int:
        return self.future_covs.shape[1]

    def take(self, idx) -> "WindowBatch":
        idx = np.asarray(idx)
        return WindowBatch(self.context[idx], self.context_mask[idx], self.context_covs[idx],
                           self.future_covs[idx], None if self.future is None else self.future[idx],
                           self.means[idx], self.starts[idx] if len(self.starts) else self.starts)

    def concat(self, other: "WindowBatch") -> "WindowBatch":
        cat = np.concatenate
        fut = None if self.future is None else cat([self.future, other.future])
        return WindowBatch(cat([self.context, other.context]), cat([self.context_mask, other.context_mask]),
                           cat([self.context_covs, other.context_covs]),
                           cat([self.future_covs, other.future_covs]), fut,
                           cat([self.means, other.means]), cat([self.starts, other.starts]))


def build_batch(frame: SeriesFrame, starts, context: int, horizon: int,
                with_targets: bool = True) -> WindowBatch:
    """Cut windows whose context begins at each of ``starts``."""
    starts = np.asarray(starts, dtype=int)
    if starts.size and (starts.min() < 0 or starts.max() + context + (horizon if with_targets else 0) > frame.T):
        raise CoverageError(f"window exceeds series bounds (T={frame.T})")
    ctx_idx = starts[:, None] + np.arange(context)[None, :]
    fut_idx = starts[:, None] + context + np.arange(horizon)[None, :]
    ctx = frame.values[ctx_idx]
    mask = frame.observed_mask[ctx_idx]
    fut = frame.values[fut_idx] if with_targets else None
    scaled, scaled_fut, means = mean_scale(ctx, fut, mask)
    stamps_ctx = frame.start + ctx_idx * frame.step
    stamps_fut = frame.start + fut_idx * frame.step
    return WindowBatch(
        context=scaled,
        context_mask=mask.astype(np.float64),
        context_covs=time_features_for(stamps_ctx, frame.freq),
        future_covs=time_features_for(stamps_fut, frame.freq),
        future=scaled_fut,
        means=means,
        starts=starts,
    )


def eval_starts(T_len: int, context: int, horizon: int, stride: int | None = None,
                n_windows: int | None = None) -> np.ndarray:
    """Context start rows of rolling windows whose forecast regions tile the tail.

    The last window ends at row ``T``; each earlier one ends ``stride`` rows
    before the next. Returned oldest first.
    """
    stride = horizon if stride is None else stride
    if stride < horizon:
        raise ValueError("evaluation stride smaller than horizon would overlap forecasts")
    starts = []
    end = T_len
    while end - horizon - context >= 0 and (n_windows is None or len(starts) < n_windows):
        starts.append(end - horizon - context)
        end -= stride
    if not starts:
        raise CoverageError(f"series of length {T_len} too short for context {context} + horizon {horizon}")
    return np.array(starts[::-1], dtype=int)


def train_starts(T_len: int, context: int, horizon: int, batch_size: int, rng: Rng,
                 end: int | None = None) -> np.ndarray:
    """Uniform random window starts with the whole window inside ``[0, end)``."""
    end = T_len if end is None else end
    hi = end - context - horizon
    if hi < 0:
        raise CoverageError(f"training region of length {end} too short for context {context} + horizon {horizon}")
    return rng.integers(0, hi + 1, size=batch_size)


def make_windows(frame: SeriesFrame, context: int, horizon: int, stride: int | None = None,
                 rng: Rng | None = None, batch_size: int = 64, n_windows: int | None = None,
                 end: int | None = None) -> Iterator[WindowBatch]:
    """Stream of window batches.

    With ``rng`` given, yields an endless stream of random training batches
    drawn from ``[0, end)``. Without it, yields one batch holding the
    deterministic non-overlapping evaluation windows from the tail.
    """
    if context + horizon > frame.T:
        raise CoverageError(f"context {context} + horizon {horizon} exceeds series length {frame.T}")
    if rng is None:
        yield build_batch(frame, eval_starts(frame.T, context, horizon, stride, n_windows), context, horizon)
        return
    while True:
        yield build_batch(frame, train_starts(frame.T, context, horizon, batch_size, rng, end), context, horizon)


# ---------------------------------------------------------------------------
# corruption and augmentation
# ---------------------------------------------------------------------------

@dataclass
class CorruptionSpec:
    """Stress conditions: longer horizon (C1) and missing context cells (C2/C3)."""

    horizon_multiplier: int = 1
    missing_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ValueError(f"missing fraction must be in [0, 1), got {self.missing_fraction}")
        if self.horizon_multiplier < 1:
            raise ValueError("horizon multiplier must be >= 1")


def inject_missing(frame: SeriesFrame, spec: CorruptionSpec, rng: Rng | None = None) -> SeriesFrame:
    """Mark a uniformly random ``missing_fraction`` of cells unobserved.

    Values are kept, so evaluation targets stay intact; only model inputs,
    which read the mask, see the corruption.
    """
    if spec.missing_fraction == 0.0:
        return frame
    rng = Rng(spec.seed) if rng is None else rng
    n = frame.values.size
    n_missing = int(round(spec.missing_fraction * n))
    idx = rng.choice(n, size=n_missing, replace=False)
    mask = frame.observed_mask.copy().reshape(-1)
    mask[idx] = False
    return replace(frame, observed_mask=mask.reshape(frame.values.shape))


def mixup(batch: WindowBatch, alpha: float, rng: Rng, lam: np.ndarray | float | None = None) -> WindowBatch:
    """Convex combination of each window with a randomly permuted partner.

    ``lam`` overrides the Beta(alpha, alpha) draw (one weight per window).
    Covariates, masks and means are those of the first window of each pair.
    """
    if alpha < 0:
        raise ValueError("mixup alpha must be nonnegative")
    B = len(batch)
    if (alpha == 0 and lam is None) or B < 2:
        return batch
    perm = rng.permutation(B)
    if lam is None:
        lam = rng.beta(alpha, alpha, size=B)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (B,))[:, None, None]
    ctx = lam * batch.context + (1 - lam) * batch.context[perm]
    fut = None if batch.future is None else lam * batch.future + (1 - lam) * batch.future[perm]
    return replace(batch, context=ctx, future=fut)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

SYNTH_KINDS = ("sinusoid-mix", "random-walk", "ar1")


def synth_generate(kind: str, D: int, T: int, noise: float = 0.1, seed: int = 0,
                   freq: str = "H", start: str = "2020-01-06T00:00", phi: float = 0.8,
                   weekly_amp: float = 0.3) -> SeriesFrame:
    """Reproducible synthetic frame.

    ``sinusoid-mix`` combines a daily harmonic pair (periods 24 and 12 steps)
    with a weekly harmonic (168 steps, amplitude ``weekly_amp``) per series,
    random phases and amplitudes, Gaussian noise, shifted positive.
    ``random-walk`` is a cumulative Gaussian sum around a positive level.
    ``ar1`` is ``x_t = phi * x_{t-1} + noise * e_t`` around a positive level.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    if D < 1 or T < 1:
        raise ValueError("D and T must be positive")
    rng = Rng(seed)
    t = np.arange(T, dtype=np.float64)[:, None]
    if kind == "sinusoid-mix":
        amp = rng.uniform(0.5, 1.5, size=D)
        phase = rng.uniform(0.0, 2 * math.pi, size=(3, D))
        level = 2.0 + 2.0 * amp
        sig = (amp * np.sin(2 * math.pi * t / 24 + phase[0])
               + 0.5 * amp * np.sin(2 * math.pi * t / 12 + phase[1])
               + weekly_amp * amp * np.sin(2 * math.pi * t / 168 + phase[2]))
        values = level + sig + noise * rng.normal((T, D))
    elif kind == "random-walk":
        steps = noise * rng.normal((T, D))
        values = 10.0 + np.cumsum(steps, axis=0)
    else:
        eps = rng.normal((T, D))
        x = np.zeros((T, D))
        x[0] = eps[0] * noise / math.sqrt(max(1 - phi * phi, 1e-12))
        for i in range(1, T):
            x[i] = phi * x[i - 1] + noise * eps[i]
        values = 5.0 + x
    return SeriesFrame(values, np.datetime64(start, "m"), freq)
