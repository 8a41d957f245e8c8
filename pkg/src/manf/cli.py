"""Command-line front end.

Exit codes: 0 success, 2 I/O failure, 3 numeric failure, 64 usage error,
65 data mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import SYNTH_KINDS, CorruptionSpec, FormatError, EmptyDataError, load_csv, synth_generate, write_csv
from .flow import NumericError
from .model import CheckpointError, ManfConfig, ManfModel, load_model, save_model
from .plotting import write_interval_svg
from .tensor import ContractError, DimensionError, Rng
from .training import TrainConfig, TrainingAborted, evaluate, history_csv, train

EXIT_OK, EXIT_IO, EXIT_NUMERIC, EXIT_USAGE, EXIT_DATA = 0, 2, 3, 64, 65
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
SWEEP_PARAMS = ("batch_size", "lr", "layers", "hidden_dim")

log = logging.getLogger("manf")


class UsageError(ValueError):
    """Bad flags or configuration; maps to exit 64."""


class DataMismatch(ValueError):
    """Checkpoint and data disagree; maps to exit 65."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    data: str
    output_dir: str
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    corruption: dict = field(default_factory=dict)
    version: int = 1

    def model_config(self, dim: int) -> ManfConfig:
        d = dict(self.model)
        d.setdefault("dim", dim)
        if d["dim"] != dim:
            raise DataMismatch(f"model.dim={d['dim']} but data has {dim} series")
        return ManfConfig.from_dict(d)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train)

    def corruption_spec(self) -> CorruptionSpec:
        return CorruptionSpec(**self.corruption)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


_SECTIONS = {"model": ManfConfig, "train": TrainConfig, "corruption": CorruptionSpec}


def parse_run_config(doc: dict) -> RunConfig:
    """Validate a run configuration document; errors name the offending field path."""
    if not isinstance(doc, dict):
        raise UsageError("config: expected a JSON object")
    top = {f.name for f in fields(RunConfig)}
    for key in doc:
        if key not in top:
            raise UsageError(f"config.{key}: unknown key")
    if doc.get("version") != 1:
        raise UsageError(f"config.version: expected 1, got {doc.get('version')!r}")
    for key in ("data", "output_dir"):
        if not isinstance(doc.get(key), str):
            raise UsageError(f"config.{key}: required string")
    for section, cls in _SECTIONS.items():
        sub = doc.get(section, {})
        if not isinstance(sub, dict):
            raise UsageError(f"config.{section}: expected an object")
        known = {f.name for f in fields(cls)}
        for key in sub:
            if key not in known:
                raise UsageError(f"config.{section}.{key}: unknown key")
    cfg = RunConfig(**doc)
    # value-level validation happens in the dataclasses themselves
    for section, build in (("train", cfg.train_config), ("corruption", cfg.corruption_spec)):
        try:
            build()
        except (TypeError, ValueError) as exc:
            raise UsageError(f"config.{section}: {exc}") from exc
    return cfg


def read_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_run_config(doc)


def _load_frame(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    return load_csv(path)


def _build_model(cfg: RunConfig, dim: int) -> ManfModel:
    try:
        mc = cfg.model_config(dim)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DataMismatch):
            raise
        raise UsageError(f"config.model: {exc}") from exc
    return ManfModel(mc)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.dims < 1 or args.steps < 1:
        raise UsageError("--dims and --steps must be positive")
    frame = synth_generate(args.kind, args.dims, args.steps, noise=args.noise, seed=args.seed, freq=args.freq)
    write_csv(frame, args.out)
    print(frame.properties())
    return EXIT_OK


def run_training(cfg: RunConfig, resume: bool = False):
    frame = _load_frame(cfg.data)
    model = _build_model(cfg, frame.D)
    tc = cfg.train_config()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint"
    result = train(model, frame, tc, resume_from=ckpt if resume else None, checkpoint_dir=ckpt)
    if tc.epochs == 0 or not ckpt.exists():
        save_model(result.model, ckpt)
    (out / "history.csv").write_text(history_csv(result.history))
    (out / "run_config.json").write_text(cfg.to_json() + "\n")
    return result, frame


def cmd_train(args) -> int:
    cfg = read_run_config(args.config)
    result, _ = run_training(cfg, resume=args.resume)
    last = result.history[-1]["loss"] if result.history else float("nan")
    print(f"trained {len(result.history)} epochs, final loss {last:.6f}; checkpoint in "
          f"{Path(cfg.output_dir) / 'checkpoint'}")
    return EXIT_OK


def _checked_model(path, frame) -> ManfModel:
    model, _, _ = load_model(path)
    if model.config.dim != frame.D:
        raise DataMismatch(f"checkpoint expects {model.config.dim} series, data has {frame.D}")
    return model


def cmd_evaluate(args) -> int:
    frame = _load_frame(args.data)
    model = _checked_model(args.checkpoint, frame)
    spec = CorruptionSpec(horizon_multiplier=args.horizon_mult, missing_fraction=args.missing, seed=args.seed)
    report = evaluate(model, frame, n_windows=args.windows, n_samples=args.samples, seed=args.seed,
                      corruption=spec, normalized=args.normalized)
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def quantile_rows(samples: np.ndarray, actual: np.ndarray | None, stamps) -> list[str]:
    """CSV rows ``t,series,q05,q25,q50,q75,q95,actual`` for (n, k, D) samples."""
    qs = np.quantile(samples, QUANTILES, axis=0)        # (5, k, D)
    k, D = samples.shape[1:]
    rows = []
    for d in range(D):
        for t in range(k):
            act = "" if actual is None else repr(float(actual[t, d]))
            vals = ",".join(repr(float(q)) for q in qs[:, t, d])
            rows.append(f"{str(stamps[t])},{d},{vals},{act}")
    return rows


def cmd_forecast(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be at least 1")
    frame = _load_frame(args.data)
    model = _checked_model(args.checkpoint, frame)
    k = model.config.horizon
    end = frame.T - k
    fc = model.forecast(frame, n=args.samples, rng=Rng(args.seed), end=end)
    actual = frame.values[end:]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["t,series,q05,q25,q50,q75,q95,actual"] + quantile_rows(fc.samples, actual, fc.timestamps)
    (out / "forecast.csv").write_text("\n".join(lines) + "\n")
    written = [out / "forecast.csv"]
    if args.plot:
        series = args.series if args.series else list(range(min(frame.D, 4)))
        qs = np.quantile(fc.samples, QUANTILES, axis=0)
        for d in series:
            if not 0 <= d < frame.D:
                raise UsageError(f"--series {d} outside 0..{frame.D - 1}")
            written.append(write_interval_svg(out / f"series_{d}.svg", *qs[:, :, d], actual=actual[:, d],
                                              title=f"series {d}"))
    for p in written:
        print(p)
    return EXIT_OK


def _sweep_config(cfg: RunConfig, param: str, value: str) -> RunConfig:
    model, tr = dict(cfg.model), dict(cfg.train)
    if param == "batch_size":
        tr["batch_size"] = int(value)
    elif param == "lr":
        tr["lr"] = float(value)
    elif param == "layers":
        model["enc_layers"] = model["dec_layers"] = int(value)
        model.pop("scales", None)
    else:
        model["hidden_dim"] = int(value)
        model.pop("cond_dim", None)
        model.pop("ffn_dim", None)
    return RunConfig(data=cfg.data, output_dir=str(Path(cfg.output_dir) / f"{param}={value}"),
                     model=model, train=tr, corruption=dict(cfg.corruption), version=cfg.version)


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise UsageError(f"--param must be one of {SWEEP_PARAMS}, got {args.param!r}")
    cfg = read_run_config(args.config)
    rows = ["param,value,crps_sum,mse"]
    for value in args.values:
        try:
            sub = _sweep_config(cfg, args.param, value)
        except ValueError as exc:
            raise UsageError(f"--values: cannot use {value!r} for {args.param}") from exc
        result, frame = run_training(sub)
        tc = sub.train_config()
        rep = evaluate(result.model, frame, n_windows=tc.eval_windows, n_samples=tc.eval_samples,
                       seed=tc.seed, corruption=sub.corruption_spec())
        rows.append(f"{args.param},{value},{rep.crps_sum!r},{rep.mse!r}")
    text = "\n".join(rows) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="manf", description="Multi-scale attention flow forecaster")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset CSV")
    s.add_argument("--kind", choices=SYNTH_KINDS, default="sinusoid-mix")
    s.add_argument("--dims", type=int, required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--freq", choices=("30min", "H", "D"), default="H")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("config")
    t.add_argument("--resume", action="store_true", help="continue from output_dir/checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score rolling windows at the end of a dataset")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--horizon-mult", type=int, default=1)
    e.add_argument("--missing", type=float, default=0.0)
    e.add_argument("--windows", type=int, default=7)
    e.add_argument("--samples", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--normalized", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("forecast", help="quantile CSV (and SVG plots) for the held-out last horizon")
    f.add_argument("checkpoint")
    f.add_argument("data")
    f.add_argument("--samples", type=int, default=100)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--plot", action="store_true")
    f.add_argument("--series", type=int, nargs="*")
    f.add_argument("--out-dir", default=".")
    f.set_defaults(func=cmd_forecast)

    w = sub.add_parser("sweep", help="train and evaluate one config per parameter value")
    w.add_argument("config")
    w.add_argument("--param", required=True)
    w.add_argument("--values", nargs="+", required=True)
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"manf: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataMismatch, DimensionError, FormatError, EmptyDataError) as exc:
        print(f"manf: data mismatch: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, NumericError, FloatingPointError) as exc:
        print(f"manf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"manf: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ContractError as exc:
        print(f"manf: data mismatch: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
