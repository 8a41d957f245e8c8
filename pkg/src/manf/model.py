"""
The full forecaster: embeddings, multi-scale encoder, cross-attention
decoder and a conditional flow stack, with exact likelihood training and
one-shot (non-autoregressive) sampling.

Each decoder layer's output, after a linear conditioner head, conditions one
coupling of the flow. The flow models the D-dim target vector of one future
step given that step's decoder state; log-densities are summed over the
horizon.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import CrossAttentionLayer, Encoder, ScaleSet, positional_encoding
from .data import SeriesFrame, WindowBatch, build_batch, n_time_features, time_features_for, unscale
from .flow import FlowStack, NumericError, flow_sample
from .nn import Linear, Module
from .tensor import ContractError, Rng, Tensor

FORMAT_VERSION = 1
BLOB_NAME = "tensors.bin"
MANIFEST_NAME = "manifest.json"


class CheckpointError(RuntimeError):
    """Unreadable or inconsistent checkpoint."""


class ChecksumError(CheckpointError):
    """Tensor blob does not match the manifest checksum."""


class IncompatibleVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


@dataclass
class ManfConfig:
    dim: int
    horizon: int = 24
    context_len: int | None = None
    hidden_dim: int = 32
    heads: int = 4
    enc_layers: int = 3
    dec_layers: int = 3
    scales: list[int] | None = None
    ffn_dim: int | None = None
    dropout: float = 0.1
    conditioning: str = "coupling"
    cond_dim: int | None = None
    flow_hidden: int = 100
    scale_clamp: float | None = 2.0
    batch_norm: bool = True
    raw_scores: bool = False
    scale_scores: bool = True
    freq: str = "H"
    series_embed_dim: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.context_len is None:
            self.context_len = 4 * self.horizon
        if self.scales is None:
            self.scales = ScaleSet.default(self.horizon, self.enc_layers).half_windows
        self.scales = [int(s) for s in self.scales]
        if self.ffn_dim is None:
            self.ffn_dim = 2 * self.hidden_dim
        if self.cond_dim is None:
            self.cond_dim = self.hidden_dim
        self.validate()

    def validate(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.horizon < 1 or self.context_len < 1:
            raise ValueError("horizon and context_len must be positive")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if len(self.scales) != self.enc_layers:
            raise ValueError(f"{len(self.scales)} scales for {self.enc_layers} encoder layers")
        ScaleSet(self.scales)
        if self.ffn_dim < self.hidden_dim:
            raise ValueError("ffn_dim must be at least hidden_dim")
        if self.conditioning not in ("coupling", "elementwise"):
            raise ValueError(f"unknown conditioning {self.conditioning!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def n_covariates(self) -> int:
        return n_time_features(self.freq)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ManfConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForecastSamples:
    """Samples in original units: ``samples`` is (n, k, D)."""

    samples: np.ndarray
    means: np.ndarray
    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype="datetime64[m]"))

    def __post_init__(self):
        if not np.all(np.isfinite(self.samples)):
            raise NumericError("non-finite forecast samples")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    def quantile(self, q) -> np.ndarray:
        return np.quantile(self.samples, q, axis=0)

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def median(self) -> np.ndarray:
        return self.quantile(0.5)


class ManfModel(Module):
    """Parameters and forward computations of the forecaster."""

    _buffers = ()

    def __init__(self, config: ManfConfig):
        self.config = cfg = config
        rng = Rng(cfg.seed)
        D, h, C = cfg.dim, cfg.hidden_dim, cfg.n_covariates
        static = D * cfg.series_embed_dim
        if cfg.series_embed_dim:
            self.series_embed = T.parameter(rng.normal((D, cfg.series_embed_dim)) * 0.1)
        # context input: scaled values, calendar covariates, observed mask
        self.enc_embed = Linear(2 * D + C + static, h, rng)
        self.dec_embed = Linear(C + static, h, rng)
        self.encoder = Encoder(h, cfg.heads, cfg.ffn_dim, ScaleSet(cfg.scales), cfg.context_len - 1,
                               rng, cfg.dropout, cfg.raw_scores, cfg.scale_scores)
        self.decoder = [CrossAttentionLayer(h, cfg.heads, cfg.ffn_dim, rng, cfg.dropout)
                        for _ in range(cfg.dec_layers)]
        self.cond_heads = [Linear(h, cfg.cond_dim, rng) for _ in range(cfg.dec_layers)]
        self.flow = FlowStack(D, cfg.cond_dim, cfg.dec_layers, rng, cfg.flow_hidden, cfg.scale_clamp,
                              cfg.conditioning, cfg.batch_norm)
        self.calls: Counter = Counter()

    # -- pieces ---------------------------------------------------------------
    def _static(self, lead: tuple) -> list[Tensor]:
        if not self.config.series_embed_dim:
            return []
        flat = self.series_embed.reshape(1, 1, -1)
        return [T.broadcast_to(flat, lead + (flat.shape[-1],))]

    def embed_inputs(self, values, covariates) -> Tensor:
        """Linear embedding of ``concat(values, covariates)`` per step."""
        values, covariates = T._t(values), T._t(covariates)
        if values.ndim == 2:
            values, covariates = values.reshape(1, *values.shape), covariates.reshape(1, *covariates.shape)
            return self.embed_inputs(values, covariates).reshape(values.shape[1], -1)
        parts = [values, covariates] + self._static(values.shape[:2])
        x = T.concat(parts, axis=-1)
        if x.shape[-1] != self.enc_embed.weight.shape[0]:
            raise T.DimensionError(f"input width {x.shape[-1]} != embedding width {self.enc_embed.weight.shape[0]}")
        return self.enc_embed(x)

    def encode(self, batch: WindowBatch, rng: Rng | None = None, training: bool = False) -> Tensor:
        self.calls["encoder"] += 1
        covs = np.concatenate([batch.context_covs, batch.context_mask], axis=-1)
        s = self.embed_inputs(batch.context, covs)
        return self.encoder(s, rng, training)

    def decode(self, future_covs, h_enc: Tensor, rng: Rng | None = None, training: bool = False,
               pe: np.ndarray | None = None) -> list[Tensor]:
        """Decoder states ``H_1 .. H_l``, each (B, k, hidden).

        Sinusoidal position encoding is added to the queries of the first
        layer only.
        """
        self.calls["decoder"] += 1
        fc = T._t(future_covs)
        squeeze = fc.ndim == 2
        if squeeze:
            fc = fc.reshape(1, *fc.shape)
            h_enc = h_enc.reshape(1, *h_enc.shape) if h_enc.ndim == 2 else h_enc
        k = fc.shape[1]
        if pe is None:
            pe = positional_encoding(k, self.config.hidden_dim)
        x = self.dec_embed(T.concat([fc] + self._static(fc.shape[:2]), axis=-1)
                           if self.config.series_embed_dim else fc)
        states = []
        for i, layer in enumerate(self.decoder):
            x = layer(x, h_enc, pe if i == 0 else None, rng, training)
            states.append(x)
        if squeeze:
            states = [s.reshape(*s.shape[1:]) for s in states]
        return states

    def conditions(self, states: list[Tensor]) -> list[Tensor]:
        """Flatten (B, k, hidden) states to per-step coupling conditions (B*k, cond)."""
        out = []
        for head, s in zip(self.cond_heads, states):
            c = head(s)
            out.append(c.reshape(-1, c.shape[-1]))
        return out

    # -- objectives -----------------------------------------------------------
    def log_prob(self, batch: WindowBatch, rng: Rng | None = None, training: bool = False) -> Tensor:
        """Log-density of each window's scaled future, summed over the horizon; shape (B,)."""
        if batch.future is None:
            raise ContractError("batch has no future targets")
        B, k, D = batch.future.shape
        if D != self.config.dim:
            raise T.DimensionError(f"batch has {D} series, model expects {self.config.dim}")
        h_enc = self.encode(batch, rng, training)
        conds = self.conditions(self.decode(batch.future_covs, h_enc, rng, training))
        lp = self.flow.log_prob(batch.future.reshape(B * k, D), conds, training)
        return lp.reshape(B, k).sum(axis=1)

    def nll(self, batch: WindowBatch, rng: Rng | None = None, training: bool = True) -> Tensor:
        """Negative log-likelihood averaged over windows (summed over the horizon)."""
        try:
            lp = self.log_prob(batch, rng, training)
        except NumericError as exc:
            raise NumericError(f"{exc} (batch of {len(batch)} windows, starts {list(batch.starts[:8])})") from exc
        loss = -lp.mean()
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss for batch with starts {list(batch.starts[:8])}")
        return loss

    # -- sampling -------------------------------------------------------------
    def sample_batch(self, batch: WindowBatch, n: int, rng: Rng) -> np.ndarray:
        """(B, n, k, D) samples in original units; one encoder and one decoder pass."""
        if n <= 0:
            raise ContractError(f"number of samples must be positive, got {n}")
        B, k = len(batch), batch.horizon
        with T.no_grad():
            h_enc = self.encode(batch)
            conds = self.conditions(self.decode(batch.future_covs, h_enc))
        raw = flow_sample(rng, conds, self.flow, n)               # (n, B*k, D)
        self.calls["flow_samples"] += n
        raw = raw.reshape(n, B, k, self.config.dim).transpose(1, 0, 2, 3)
        return unscale(raw, batch.means[:, None, :])

    def forecast(self, frame: SeriesFrame, n: int = 100, rng: Rng | None = None,
                 horizon: int | None = None, end: int | None = None) -> ForecastSamples:
        """Sample the ``horizon`` steps following row ``end`` (default: after the frame)."""
        cfg = self.config
        if frame.D != cfg.dim:
            raise T.DimensionError(f"frame has {frame.D} series, model expects {cfg.dim}")
        horizon = cfg.horizon if horizon is None else horizon
        end = frame.T if end is None else end
        if end < cfg.context_len:
            raise ContractError(f"history of {end} rows shorter than context {cfg.context_len}")
        rng = Rng(cfg.seed) if rng is None else rng
        start = end - cfg.context_len
        batch = build_batch(frame, [start], cfg.context_len, horizon, with_targets=False)
        samples = self.sample_batch(batch, n, rng)[0]
        stamps = frame.start + (end + np.arange(horizon)) * frame.step
        return ForecastSamples(samples, batch.means[0], stamps)

    # -- state ----------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v.data for k, v in self.named_parameters()}
        for name, owner, attr in self.named_buffers():
            out[f"buffer.{name}"] = getattr(owner, attr)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {name: (owner, attr) for name, owner, attr in self.named_buffers()}
        expected = {f"param.{k}" for k in params} | {f"buffer.{k}" for k in buffers}
        missing = expected - set(arrays)
        if missing:
            raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = arrays[f"param.{k}"]
            if arr.shape != p.shape:
                raise CheckpointError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
        for k, p in params.items():
            p.data = np.array(arrays[f"param.{k}"], dtype=np.float64)
        for k, (owner, attr) in buffers.items():
            setattr(owner, attr, np.array(arrays[f"buffer.{k}"], dtype=np.float64))


# ---------------------------------------------------------------------------
# checkpoint directory: manifest.json + one little-endian f64 blob
# ---------------------------------------------------------------------------

def write_tensors(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "<f8",
                        "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    blob = b"".join(chunks)
    manifest = {"format_version": FORMAT_VERSION, **meta, "tensors": entries,
                "blob": BLOB_NAME, "sha256": hashlib.sha256(blob).hexdigest()}
    (path / BLOB_NAME).write_bytes(blob)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest in {path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise IncompatibleVersionError(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    blob = (path / manifest.get("blob", BLOB_NAME)).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ChecksumError(f"tensor blob in {path} fails checksum")
    arrays = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).astype(np.float64).reshape(e["shape"])
    return arrays, manifest


def save_model(model: ManfModel, path, extra_arrays: dict | None = None, extra: dict | None = None) -> None:
    arrays = dict(model.state_arrays())
    if extra_arrays:
        arrays.update(extra_arrays)
    meta = {"config": model.config.to_dict()}
    if extra:
        meta["extra"] = extra
    write_tensors(path, arrays, meta)


def load_model(path) -> tuple[ManfModel, dict[str, np.ndarray], dict]:
    """Returns (model, arrays not belonging to the model, extra metadata)."""
    arrays, manifest = read_tensors(path)
    model = ManfModel(ManfConfig.from_dict(manifest["config"]))
    model.load_arrays(arrays)
    own = set(model.state_arrays())
    rest = {k: v for k, v in arrays.items() if k not in own}
    return model, rest, manifest.get("extra", {})
