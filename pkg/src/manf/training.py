"""Adam training of the likelihood objective, checkpointed resumption, and rolling evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import CorruptionSpec, SeriesFrame, build_batch, eval_starts, inject_missing, mixup, train_starts
from .flow import NumericError
from .metrics import ScoreReport, baseline_forecast, score
from .model import ManfModel, load_model, save_model
from .tensor import ContractError, Rng, Tensor

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Loss was non-finite on two consecutive steps."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    batches_per_epoch: int = 100
    grad_clip: float | None = 10.0
    seed: int = 0
    mixup_alpha: float = 0.2
    eval_every: int = 0
    eval_windows: int = 7
    eval_samples: int = 100

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.batches_per_epoch < 1:
            raise ValueError("lr, batch_size, batches_per_epoch must be positive and epochs nonnegative")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")
        if self.mixup_alpha < 0:
            raise ValueError("mixup_alpha must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Bias-corrected Adam over a fixed, named parameter set."""

    def __init__(self, named_params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params: dict[str, Tensor] = dict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step_count = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        missing = [k for k, p in self.params.items() if p.grad is None]
        if len(missing) == len(self.params):
            raise ContractError("adam step called without any gradients")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = np.array(arrays[f"adam.m.{k}"])
            self.v[k] = np.array(arrays[f"adam.v.{k}"])
        self.step_count = int(step_count)


def adam_step(params, state: Adam, lr: float | None = None) -> None:
    """Functional alias: ``params`` must be the set ``state`` was built over."""
    if set(dict(params)) != set(state.params):
        raise ContractError("parameter set differs from the optimizer's")
    state.step(lr)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        factor = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


def default_train_end(frame: SeriesFrame, model: ManfModel, cfg: TrainConfig) -> int:
    """Training windows stay clear of the evaluation tail."""
    return frame.T - cfg.eval_windows * model.config.horizon


@dataclass
class TrainResult:
    model: ManfModel
    history: list[dict] = field(default_factory=list)
    optimizer: Adam | None = None
    rng: Rng | None = None
    epoch: int = 0


def train(model: ManfModel, frame: SeriesFrame, cfg: TrainConfig, resume_from=None,
          checkpoint_dir=None, train_end: int | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of mixup-augmented likelihood training.

    With ``resume_from`` (a directory written by :func:`save_training`), the
    model, optimizer moments, random state and history continue from where
    that run stopped. With ``checkpoint_dir``, a resumable checkpoint is
    written after every epoch.
    """
    mc = model.config
    if frame.D != mc.dim:
        raise ContractError(f"frame has {frame.D} series, model expects {mc.dim}")
    opt = Adam(model.named_parameters(), lr=cfg.lr)
    rng = Rng(cfg.seed)
    history: list[dict] = []
    start_epoch = 0
    if resume_from is not None:
        model, opt, rng, start_epoch, history = load_training(resume_from, cfg)
    end = default_train_end(frame, model, cfg) if train_end is None else train_end
    params = model.parameters()
    for epoch in range(start_epoch, cfg.epochs):
        losses, bad_streak = [], 0
        for _ in range(cfg.batches_per_epoch):
            batch = build_batch(frame, train_starts(frame.T, mc.context_len, mc.horizon, cfg.batch_size, rng, end),
                                mc.context_len, mc.horizon)
            if cfg.mixup_alpha > 0:
                batch = mixup(batch, cfg.mixup_alpha, rng)
            opt.zero_grad()
            try:
                loss = model.nll(batch, rng, training=True)
            except NumericError as exc:
                bad_streak += 1
                log.warning("epoch %d: %s", epoch, exc)
                if bad_streak >= 2:
                    raise TrainingAborted(f"non-finite loss on consecutive steps in epoch {epoch}: {exc}") from exc
                continue
            bad_streak = 0
            loss.backward()
            if cfg.grad_clip is not None:
                clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            losses.append(loss.item())
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else float("nan"),
               "crps_sum": float("nan"), "mse": float("nan")}
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            rep = evaluate(model, frame, n_windows=cfg.eval_windows, n_samples=cfg.eval_samples,
                           seed=cfg.seed)
            row["crps_sum"], row["mse"] = rep.crps_sum, rep.mse
        history.append(row)
        log.info("epoch %d loss %.4f", epoch + 1, row["loss"])
        if checkpoint_dir is not None:
            save_training(checkpoint_dir, model, opt, rng, epoch + 1, history, cfg)
    return TrainResult(model, history, opt, rng, max(start_epoch, cfg.epochs))


def save_training(path, model: ManfModel, opt: Adam, rng: Rng, epoch: int, history: list[dict],
                  cfg: TrainConfig) -> None:
    extra = {"epoch": epoch, "rng": rng.get_state(), "adam_step": opt.step_count,
             "history": history, "train_config": asdict(cfg)}
    save_model(model, path, extra_arrays=opt.state_arrays(), extra=extra)


def load_training(path, cfg: TrainConfig | None = None):
    """Returns (model, optimizer, rng, epoch, history)."""
    model, arrays, extra = load_model(path)
    if "epoch" not in extra:
        raise ContractError(f"{path} is a model checkpoint without training state")
    lr = cfg.lr if cfg is not None else extra["train_config"]["lr"]
    opt = Adam(model.named_parameters(), lr=lr)
    opt.load_arrays(arrays, extra["adam_step"])
    rng = Rng(0)
    rng.set_state(extra["rng"])
    return model, opt, rng, int(extra["epoch"]), list(extra["history"])


def history_csv(history: list[dict]) -> str:
    lines = ["epoch,loss,crps_sum,mse"]
    for r in history:
        lines.append(",".join(["%d" % r["epoch"]] + [repr(float(r[k])) for k in ("loss", "crps_sum", "mse")]))
    return "\n".join(lines) + "\n"


def _eval_windows(frame: SeriesFrame, context: int, horizon: int, n_windows: int | None):
    starts = eval_starts(frame.T, context, horizon, horizon, n_windows)
    fut_idx = starts[:, None] + context + np.arange(horizon)[None, :]
    return starts, frame.values[fut_idx]


def evaluate(model: ManfModel, frame: SeriesFrame, n_windows: int | None = 7, n_samples: int = 100,
             seed: int = 0, corruption: CorruptionSpec | None = None, horizon: int | None = None,
             normalized: bool = False) -> ScoreReport:
    """Score rolling non-overlapping forecast windows at the end of ``frame``.

    ``corruption`` masks context cells (targets are scored against the
    original values) and multiplies the horizon.
    """
    mc = model.config
    if frame.D != mc.dim:
        raise ContractError(f"frame has {frame.D} series, model expects {mc.dim}")
    horizon = mc.horizon if horizon is None else horizon
    if corruption is not None:
        horizon *= corruption.horizon_multiplier
        frame = inject_missing(frame, corruption)
    starts, obs = _eval_windows(frame, mc.context_len, horizon, n_windows)
    batch = build_batch(frame, starts, mc.context_len, horizon, with_targets=False)
    samples = model.sample_batch(batch, n_samples, Rng(seed))
    return score(samples, obs, normalized)


def evaluate_baseline(kind: str, frame: SeriesFrame, context: int, horizon: int, n_windows: int | None = 7,
                      n_samples: int = 100, seed: int = 0, normalized: bool = False) -> ScoreReport:
    rng = Rng(seed)
    starts, obs = _eval_windows(frame, context, horizon, n_windows)
    samples = np.stack([
        baseline_forecast(kind, frame.values[s: s + context], horizon, n_samples, rng,
                          frame.observed_mask[s: s + context])
        for s in starts])
    return score(samples, obs, normalized)
