"""Metrics and the desk-scale experiment protocol.

One replication simulates a monitored stream (regular pacing plus at most one
abnormal stimulation), runs every detector with the limit at infinity and
then reads alarms off the stored statistic paths under each calibrated limit.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anomaly import SplineBasis, build_spline_basis
from .cable import (AnomalyGroundTruth, SimulationError, SpatioTemporalField, add_noise,
                    inject_anomalies, make_protocol, simulate, stimulus_field, with_duration)
from .config import Config, dump_config
from .metamodels import Metamodel, build_model, compile_inference, load_checkpoint, save_checkpoint
from .monitoring import (ControlLimit, MonitoringRecord, StreamSetup, calibrate_control_limit,
                         hotelling_monitor, monitor_stream, residual_monitor,
                         write_monitoring_csv)
from .phase1 import TrainingHistory, select_gamma, train_phase1

log = logging.getLogger(__name__)

# rng stream tags, one per purpose
_TRAIN, _GAMMA, _CALIB, _TEST, _ROLL = range(5)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds why."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage}: {exc}")
        self.stage = stage


# ---------------------------------------------------------------- metrics


def rmse(predictions, truths, reference) -> float:
    """Relative mean squared error of rollouts.

    ``predictions``/``truths`` are ``(N, T, n_x)`` and ``reference`` holds the
    frame ``mu(t0)`` each rollout started from, ``(N, n_x)``::

        1/(N T n_x) * sum_i sum_t ||pred - truth||^2 / ||reference_i||^2
    """
    pred = np.asarray(predictions, dtype=float)
    true = np.asarray(truths, dtype=float)
    if pred.ndim == 2:
        pred, true = pred[None], true[None]
    ref = np.atleast_2d(np.asarray(reference, dtype=float))
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    if ref.shape != (pred.shape[0], pred.shape[2]):
        raise ValueError("one reference frame per rollout is required")
    norms = np.sum(ref * ref, axis=1)
    if np.any(norms == 0):
        raise ValueError("reference frame has zero norm")
    N, Tn, nx = pred.shape
    err = np.sum((pred - true) ** 2, axis=2)  # (N, T)
    return float(np.sum(err / norms[:, None]) / (N * Tn * nx))


@dataclass
class DetectionOutcome:
    detected: frozenset
    truth: frozenset
    precision: float
    recall: float
    f1: float
    delay: float = math.nan  # steps; nan when there was no alarm
    censored: bool = False


def detection_metrics(detected, truth, alarm_time: float | None = None,
                      onset: float | None = None) -> DetectionOutcome:
    """Precision, recall and F1 of a detected set against the true one."""
    det, tru = frozenset(detected), frozenset(truth)
    hit = len(det & tru)
    p = hit / len(det) if det else 0.0
    r = hit / len(tru) if tru else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    if alarm_time is None or onset is None:
        return DetectionOutcome(det, tru, p, r, f1, math.nan, alarm_time is None)
    return DetectionOutcome(det, tru, p, r, f1, float(alarm_time - onset), False)


@dataclass
class ArlSummary:
    mean: float
    std: float
    n: int
    n_censored: int


def arl1(delays, censored=None) -> ArlSummary:
    """Mean and spread of detection delays over the uncensored runs."""
    d = np.asarray(delays, dtype=float)
    cens = np.zeros(d.shape, dtype=bool) if censored is None else np.asarray(censored, dtype=bool)
    if d.shape != cens.shape:
        raise ValueError("one censoring flag per delay")
    ok = d[~cens]
    if ok.size == 0:
        raise ValueError("every run is censored")
    std = float(ok.std(ddof=1)) if ok.size > 1 else 0.0
    return ArlSummary(float(ok.mean()), std, int(ok.size), int(cens.sum()))


# ---------------------------------------------------------------- streams


def _rng(cfg: Config, purpose: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([cfg.experiment.seed, purpose, index])


@dataclass
class Stream:
    setup: StreamSetup
    clean: np.ndarray  # noise-free field
    truth: list[AnomalyGroundTruth]
    cycle: int

    @property
    def onset(self) -> int | None:
        return self.truth[0].frames()[0] if self.truth else None

    @property
    def cells(self) -> frozenset:
        return frozenset(self.truth[0].cells) if self.truth else frozenset()


def make_stream(cfg: Config, rng: np.random.Generator, delta: float,
                length: int | None = None) -> Stream:
    d = cfg.data
    n = length or d.stream_length
    cycle = int(rng.choice(d.cycles))
    sched = make_protocol(d.case, cycle, d.sites, n, d.amplitude, d.stim_duration, d.stim_cells)
    # an event starting at t0 first shows in frame t0 + 1
    t_range = (d.onset_min - 1, d.onset_max - 1 + d.anomaly_duration)
    full, truth = inject_anomalies(sched, 1 if delta > 0 else 0, delta, d.amplitude, rng,
                                   cfg.cable.n_cells, t_range, d.anomaly_cells, d.anomaly_duration)
    clean = simulate(with_duration(cfg.cable, n), full)
    noisy = add_noise(clean, d.sigma, rng)
    stim = stimulus_field(sched, n, cfg.cable.n_cells, cfg.cable.dt_record)
    return Stream(StreamSetup(noisy.values, stim, d.warmup), clean.values, truth, cycle)


def training_data(cfg: Config):
    d = cfg.data
    rng = _rng(cfg, _TRAIN)
    fields, schedules = [], []
    for i in range(d.n_train):
        cycle = d.cycles[i % len(d.cycles)]
        sched = make_protocol(d.case, cycle, d.sites, d.train_length, d.amplitude,
                              d.stim_duration, d.stim_cells)
        clean = simulate(with_duration(cfg.cable, d.train_length), sched)
        fields.append(add_noise(clean, d.sigma, rng))
        schedules.append(sched)
    return fields, schedules


def train_or_load(cfg: Config) -> tuple[Metamodel, TrainingHistory | None]:
    if cfg.model.checkpoint:
        try:
            model = load_checkpoint(cfg.model.checkpoint)
        except (OSError, ValueError) as exc:
            raise StageError("train/load", exc) from exc
        if model.arch != cfg.model.arch:
            raise StageError("train/load", ValueError(
                f"checkpoint holds {model.arch}, config asks for {cfg.model.arch}"))
        return model, None
    try:
        fields, schedules = training_data(cfg)
    except (SimulationError, ValueError) as exc:
        raise StageError("simulate", exc) from exc
    model = build_model(cfg.model.arch, **cfg.model.hyper())
    try:
        return train_phase1(fields, schedules, model, cfg.phase1)
    except FloatingPointError as exc:
        raise StageError("train/load", exc) from exc


# ---------------------------------------------------------------- detectors


def free_residuals(setup: StreamSetup, model: Metamodel) -> np.ndarray:
    """``y_t - mu_t`` of the free-running mean over the monitored frames."""
    fast = compile_inference(model)
    y, stim = setup.y, setup.stim
    carry = fast.start(y[0])
    for j in range(setup.warmup - 1):
        carry, _ = fast.step(carry, y[j], stim[j + 1])
    mu = y[setup.warmup - 1].copy()
    out = np.empty((y.shape[0] - setup.warmup, y.shape[1]))
    for i, t in enumerate(range(setup.warmup, y.shape[0])):
        carry, g = fast.step(carry, mu, stim[t])
        mu = mu + g[0] + stim[t]
        out[i] = y[t] - mu
    return out


def choose_gamma(cfg: Config, model: Metamodel, basis: SplineBasis, n_streams: int = 3) -> float:
    """Sparsity width from in-control residual projections (target FDR)."""
    m = cfg.monitor
    if m.gamma > 0:
        return m.gamma
    res = [free_residuals(make_stream(cfg, _rng(cfg, _GAMMA, i), 0.0).setup, model)
           for i in range(n_streams)]
    return select_gamma(np.vstack(res), m.target_fdr, basis.matrix, scale=2 * m.step)


@dataclass
class Pipeline:
    cfg: Config
    model: Metamodel
    basis: SplineBasis
    gamma: float

    @classmethod
    def build(cls, cfg: Config, model: Metamodel) -> "Pipeline":
        p, m = cfg.cable.n_cells, cfg.monitor
        basis = build_spline_basis(p, p if m.identity_basis else m.basis_size, m.identity_basis)
        return cls(cfg, model, basis, choose_gamma(cfg, model, basis))

    def paths(self, setup: StreamSetup) -> dict[str, list[MonitoringRecord]]:
        """Statistic paths of every configured detector (no limit applied)."""
        m = self.cfg.monitor
        out = {}
        for name in m.detectors:
            if name == "dstsd":
                out[name] = monitor_stream(setup, self.model, self.basis, math.inf, (m.window,),
                                           self.gamma, m.step, m.epochs)
            elif name == "residual":
                out[name] = residual_monitor(setup, self.model)
            else:
                out[name] = hotelling_monitor(setup)
        return out

    def calibrate(self) -> dict[str, ControlLimit]:
        m = self.cfg.monitor
        stats: dict[str, list[np.ndarray]] = {k: [] for k in m.detectors}
        for i in range(m.n_calibration):
            setup = make_stream(self.cfg, _rng(self.cfg, _CALIB, i), 0.0).setup
            for k, recs in self.paths(setup).items():
                stats[k].append(np.array([r.stat for r in recs]))
        return {k: calibrate_control_limit(v, m.target_arl, m.arl_tol) for k, v in stats.items()}


def first_alarm(records: list[MonitoringRecord], L: float, after: int) -> MonitoringRecord | None:
    for r in records:
        if r.t >= after:
            rec = r.under(L)
            if rec.alarm:
                return rec
    return None


def score(records: list[MonitoringRecord], L: float, stream: Stream) -> DetectionOutcome:
    """Cells flagged at the first alarm on or after the anomaly onset."""
    onset = stream.onset
    if onset is None:
        raise ValueError("stream has no anomaly")
    hit = first_alarm(records, L, onset)
    if hit is None:
        out = detection_metrics((), stream.cells)
        return dataclasses.replace(out, censored=True)
    return detection_metrics(hit.support, stream.cells, hit.t, onset)


# ---------------------------------------------------------------- rollout value


def rollout_errors(cfg: Config, model: Metamodel, n_streams: int | None = None,
                   steps: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(predictions, truths, references)`` of free rollouts from clean
    in-control histories of ``warmup`` frames."""
    n_streams = n_streams or cfg.experiment.rollout_streams
    steps = steps or cfg.experiment.rollout_steps
    w = cfg.data.warmup
    fast = compile_inference(model)
    preds, truths, refs = [], [], []
    for i in range(n_streams):
        s = make_stream(cfg, _rng(cfg, _ROLL, i), 0.0, length=w + steps)
        y, stim = s.setup.y, s.setup.stim
        carry = fast.start(y[0])
        for j in range(w - 1):
            carry, _ = fast.step(carry, y[j], stim[j + 1])
        mu = y[w - 1].copy()
        out = np.empty((steps, y.shape[1]))
        for k in range(steps):
            t = w + k
            carry, g = fast.step(carry, mu, stim[t])
            mu = mu + g[0] + stim[t]
            out[k] = mu
        preds.append(out)
        truths.append(s.clean[w:w + steps])
        refs.append(s.clean[w - 1])
    return np.array(preds), np.array(truths), np.array(refs)


# ---------------------------------------------------------------- experiment


@dataclass
class ReplicationRow:
    delta: float
    rep: int
    detector: str
    onset: int
    alarm_t: int
    delay: float
    censored: bool
    precision: float
    recall: float
    f1: float


def run_replications(pipe: Pipeline, limits: dict[str, ControlLimit], delta: float,
                     n: int, monitor_dir: Path | None = None) -> list[ReplicationRow]:
    rows = []
    for i in range(n):
        # the stream depends on the replication index only, so every delta
        # sees the same pacing, onset and site draws
        stream = make_stream(pipe.cfg, _rng(pipe.cfg, _TEST, i), delta)
        for name, recs in pipe.paths(stream.setup).items():
            L = limits[name].L
            out = score(recs, L, stream)
            rows.append(ReplicationRow(delta, i, name, stream.onset,
                                       -1 if out.censored else int(stream.onset + out.delay),
                                       out.delay, out.censored, out.precision, out.recall, out.f1))
            if monitor_dir is not None:
                write_monitoring_csv(monitor_dir / f"{name}_d{delta:g}_r{i:03d}.csv",
                                     [r.under(L) for r in recs])
    return rows


def summarize(rows: list[ReplicationRow]) -> list[dict]:
    out = []
    keys = sorted({(r.delta, r.detector) for r in rows}, key=lambda k: (k[0], k[1]))
    for delta, det in keys:
        sel = [r for r in rows if r.delta == delta and r.detector == det]
        delays = np.array([r.delay for r in sel])
        cens = np.array([r.censored for r in sel])
        try:
            a = arl1(delays, cens)
            arl_mean, arl_std = a.mean, a.std
        except ValueError:
            arl_mean = arl_std = math.nan
        # censored runs count as never detected when taking the median delay
        med_delay = float(np.median(np.where(cens, np.inf, delays)))
        out.append(dict(
            delta=delta, detector=det, n=len(sel), n_censored=int(cens.sum()),
            precision=float(np.mean([r.precision for r in sel])),
            recall=float(np.mean([r.recall for r in sel])),
            f1=float(np.mean([r.f1 for r in sel])),
            median_f1=float(np.median([r.f1 for r in sel])),
            arl1=arl_mean, arl1_std=arl_std, median_delay=med_delay,
        ))
    return out


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _markdown(summary: list[dict], limits: dict[str, ControlLimit], rollout: list[dict],
              gamma: float) -> str:
    lines = ["# Experiment summary", "", "## Detection", "",
             "| delta | detector | precision | recall | F1 | median F1 | ARL1 (std) | median delay | censored |",
             "|---|---|---|---|---|---|---|---|---|"]
    for s in summary:
        lines.append(f"| {s['delta']:g} | {s['detector']} | {s['precision']:.3f} | {s['recall']:.3f} | "
                     f"{s['f1']:.3f} | {s['median_f1']:.3f} | {s['arl1']:.2f} ({s['arl1_std']:.2f}) | "
                     f"{s['median_delay']:g} | {s['n_censored']}/{s['n']} |")
    lines += ["", "## Control limits", "", "| detector | L | ARL0 | s.e. |", "|---|---|---|---|"]
    for k, c in limits.items():
        lines.append(f"| {k} | {c.L:.6g} | {c.arl:.1f} | {c.se:.1f} |")
    lines += ["", f"Sparsity width gamma = {gamma:.6g}", "", "## Rollout rMSE", "",
              "| model | rMSE |", "|---|---|"]
    for r in rollout:
        lines.append(f"| {r['model']} | {r['rmse']:.6g} |")
    return "\n".join(lines) + "\n"


_GNUPLOT = """# gnuplot -e "dir='.'" plot.gp
set datafile separator ','
set key autotitle columnhead
set xlabel 'delta'
set ylabel 'mean F1'
set terminal pngcairo size 800,500
set output dir.'/f1_vs_delta.png'
plot for [d in "dstsd residual hotelling"] \\
    '< grep -E "^[^,]*,'.d.'," '.dir.'/metrics.csv' using 1:5 with linespoints title d
"""


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(cfg: Config, out: Path | str, deltas=None, write_streams: bool = True) -> Path:
    """simulate -> train/load -> calibrate -> monitor -> metrics, all under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    deltas = tuple(cfg.experiment.deltas if deltas is None else deltas)
    (out / "config.ini").write_text(dump_config(cfg))

    model, history = train_or_load(cfg)
    save_checkpoint(out / "model.mdl", model)
    if history is not None:
        _write_csv(out / "training_loss.csv",
                   [dict(epoch=i, optimizer=o, loss=l)
                    for i, (l, o) in enumerate(zip(history.epoch_loss, history.optimizer))])

    try:
        pipe = Pipeline.build(cfg, model)
        limits = pipe.calibrate()
    except (SimulationError, FloatingPointError, RuntimeError, ValueError) as exc:
        raise StageError("calibrate", exc) from exc
    _write_csv(out / "control_limits.csv",
               [dict(detector=k, L=c.L, target=c.target, arl0=c.arl, se=c.se, n=c.n_replications)
                for k, c in limits.items()])

    mon_dir = out / "monitoring"
    if write_streams:
        mon_dir.mkdir(exist_ok=True)
    rows = []
    try:
        for delta in deltas:
            rows += run_replications(pipe, limits, float(delta), cfg.experiment.replications,
                                     mon_dir if write_streams else None)
    except (SimulationError, FloatingPointError) as exc:
        raise StageError("monitor", exc) from exc
    _write_csv(out / "replications.csv", [dataclasses.asdict(r) for r in rows])
    summary = summarize(rows)
    _write_csv(out / "metrics.csv", summary)

    trained = rmse(*rollout_errors(cfg, model))
    fresh = build_model(cfg.model.arch, **cfg.model.hyper())
    untrained = rmse(*rollout_errors(cfg, fresh))
    roll = [dict(model=f"{cfg.model.arch} trained", rmse=trained),
            dict(model=f"{cfg.model.arch} untrained", rmse=untrained)]
    _write_csv(out / "rollout.csv", roll)
    (out / "summary.md").write_text(_markdown(summary, limits, roll, pipe.gamma))
    (out / "plot.gp").write_text(_GNUPLOT)

    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = dict(
        seed=cfg.experiment.seed,
        config_sha256=cfg.digest(),
        deltas=list(deltas),
        gamma=pipe.gamma,
        files={str(p.relative_to(out)): _sha(p) for p in files},
    )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def sweep_deltas(lo: float = 0.15, hi: float = 0.35, step: float = 0.015) -> tuple[float, ...]:
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return tuple(round(lo + i * step, 10) for i in range(n))
