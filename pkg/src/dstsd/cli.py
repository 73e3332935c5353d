"""Command line entry point: ``dstsd <subcommand> [--config F] [--seed N] [--out DIR]``.

Exit status is 0 on success, 2 for configuration or input errors and 3 for
numerical failures (blow-up, non-finite training loss, ...).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .anomaly import write_coefficients
from .cable import SimulationError, SpatioTemporalField, make_protocol, stimulus_field
from .config import Config, ConfigError, load_config
from .evaluation import (Pipeline, StageError, _rng, _TEST, _write_csv, make_stream,
                         run_experiment, sweep_deltas, train_or_load)
from .fieldio import (FormatError, read_field, read_schedule, write_field, write_field_csv,
                      write_ground_truth, write_schedule)
from .metamodels import compile_inference, load_checkpoint, save_checkpoint
from .monitoring import (StreamSetup, hotelling_monitor, monitor_stream, residual_monitor,
                         write_monitoring_csv)

log = logging.getLogger("dstsd")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _globals() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags sit before or after the subcommand
    p.add_argument("--config", default=argparse.SUPPRESS, help="INI file with [section] key = value")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _globals()
    ap = argparse.ArgumentParser(prog="dstsd", parents=[common],
                                 description="Simulate, learn and monitor cardiac cable fields.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate one noisy stream")
    s.add_argument("--delta", type=float, default=0.0, help="abnormal stimulus strength / R0")
    s.add_argument("--length", type=int, default=None, help="frames (default: data.stream_length)")
    s.add_argument("--csv", action="store_true", help="also write field.csv")

    sub.add_parser("train", parents=[common], help="train the metamodel")

    s = sub.add_parser("predict", parents=[common], help="roll a trained model forward")
    s.add_argument("--model", required=True)
    s.add_argument("--field", required=True)
    s.add_argument("--schedule", required=True)
    s.add_argument("--history", type=int, required=True, help="observed frames to warm up on")
    s.add_argument("--steps", type=int, required=True)

    s = sub.add_parser("monitor", parents=[common], help="monitor one stream")
    s.add_argument("--model", required=True)
    s.add_argument("--field", required=True)
    s.add_argument("--schedule", required=True)
    s.add_argument("--detector", choices=("dstsd", "residual", "hotelling"), default="dstsd")
    s.add_argument("--limit", type=float, default=math.inf)

    s = sub.add_parser("calibrate", parents=[common], help="control limits for a target ARL0")
    s.add_argument("--model", default=None, help="checkpoint (default: train from config)")

    sub.add_parser("evaluate", parents=[common], help="full experiment at the configured deltas")

    s = sub.add_parser("sweep", parents=[common], help="experiment over a delta grid")
    s.add_argument("--deltas", default="0.15,0.35,0.015", help="lo,hi,step")
    return ap


def _config(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    seed = getattr(args, "seed", None)
    if seed is not None:
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        cfg = cfg.with_seed(seed)
    return cfg


def _load_model(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise ConfigError(f"cannot read model {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _read_inputs(args, cfg: Config) -> tuple[SpatioTemporalField, np.ndarray]:
    try:
        fld = read_field(args.field)
        sched = read_schedule(args.schedule)
    except OSError as exc:
        raise ConfigError(f"cannot read input: {exc}") from exc
    stim = stimulus_field(sched, fld.n_time, fld.n_space, fld.dt)
    return fld, stim


def cmd_simulate(args, cfg: Config, out: Path) -> None:
    stream = make_stream(cfg, _rng(cfg, _TEST), args.delta, args.length)
    fld = SpatioTemporalField(stream.setup.y, cfg.cable.dt_record)
    write_field(out / "field.bin", fld)
    write_field(out / "clean.bin", SpatioTemporalField(stream.clean, cfg.cable.dt_record))
    if args.csv:
        write_field_csv(out / "field.csv", fld)
    d = cfg.data
    sched = make_protocol(d.case, stream.cycle, d.sites, fld.n_time, d.amplitude,
                          d.stim_duration, d.stim_cells)
    write_schedule(out / "schedule.txt", sched)
    write_ground_truth(out / "truth.txt", stream.truth)


def cmd_train(args, cfg: Config, out: Path) -> None:
    model, history = train_or_load(cfg)
    save_checkpoint(out / "model.mdl", model)
    if history is not None:
        _write_csv(out / "training_loss.csv",
                   [dict(epoch=i, optimizer=o, loss=l)
                    for i, (l, o) in enumerate(zip(history.epoch_loss, history.optimizer))])


def cmd_predict(args, cfg: Config, out: Path) -> None:
    model = _load_model(args.model)
    fld, stim = _read_inputs(args, cfg)
    h = args.history
    if not 1 <= h <= fld.n_time or args.steps < 1:
        raise ConfigError("need 1 <= history <= n_time and steps >= 1")
    if stim.shape[0] < h + args.steps:
        stim = np.vstack([stim, np.zeros((h + args.steps - stim.shape[0], fld.n_space))])
    fast = compile_inference(model)
    y = fld.values
    carry = fast.start(y[0])
    for j in range(h - 1):
        carry, _ = fast.step(carry, y[j], stim[j + 1])
    mu = y[h - 1].copy()
    pred = np.empty((args.steps, fld.n_space))
    for k in range(args.steps):
        carry, g = fast.step(carry, mu, stim[h + k])
        mu = mu + g[0] + stim[h + k]
        if not np.all(np.isfinite(mu)):
            raise FloatingPointError(f"prediction diverged at step {k}")
        pred[k] = mu
    res = SpatioTemporalField(pred, fld.dt)
    write_field(out / "prediction.bin", res)
    write_field_csv(out / "prediction.csv", res)


def cmd_monitor(args, cfg: Config, out: Path) -> None:
    model = _load_model(args.model)
    fld, stim = _read_inputs(args, cfg)
    if fld.n_space != cfg.cable.n_cells:
        raise ConfigError(f"field has {fld.n_space} cells, config says {cfg.cable.n_cells}")
    try:
        setup = StreamSetup(fld.values, stim, cfg.data.warmup)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.detector == "dstsd":
        pipe = Pipeline.build(cfg, model)
        m = cfg.monitor
        recs, coeffs = monitor_stream(setup, model, pipe.basis, args.limit, (m.window,), pipe.gamma,
                                      m.step, m.epochs, keep_coefficients=True)
        write_coefficients(out / "coefficients.csv", coeffs)
    elif args.detector == "residual":
        recs = residual_monitor(setup, model, args.limit)
    else:
        recs = hotelling_monitor(setup, args.limit)
    write_monitoring_csv(out / "monitoring.csv", recs)


def cmd_calibrate(args, cfg: Config, out: Path) -> None:
    if args.model:
        model = _load_model(args.model)
    else:
        model, _ = train_or_load(cfg)
    pipe = Pipeline.build(cfg, model)
    limits = pipe.calibrate()
    _write_csv(out / "control_limits.csv",
               [dict(detector=k, L=c.L, target=c.target, arl0=c.arl, se=c.se, n=c.n_replications)
                for k, c in limits.items()])


def cmd_evaluate(args, cfg: Config, out: Path) -> None:
    run_experiment(cfg, out)


def cmd_sweep(args, cfg: Config, out: Path) -> None:
    try:
        lo, hi, step = (float(v) for v in args.deltas.split(","))
    except ValueError:
        raise ConfigError("--deltas must be lo,hi,step") from None
    if not (0 < lo <= hi and step > 0):
        raise ConfigError("--deltas needs 0 < lo <= hi and step > 0")
    run_experiment(cfg, out, deltas=sweep_deltas(lo, hi, step), write_streams=False)


COMMANDS = dict(simulate=cmd_simulate, train=cmd_train, predict=cmd_predict, monitor=cmd_monitor,
                calibrate=cmd_calibrate, evaluate=cmd_evaluate, sweep=cmd_sweep)

_NUMERIC = (SimulationError, FloatingPointError, OverflowError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = Path(getattr(args, "out", None) or "out")
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except (ConfigError, FormatError) as exc:
        print(f"dstsd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"dstsd: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.__cause__, _NUMERIC) else EXIT_CONFIG
    except _NUMERIC as exc:
        print(f"dstsd: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
