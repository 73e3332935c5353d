"""Online detection: LRT statistic, control limits, stream monitors, baselines."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .anomaly import AnomalyCoefficients, SplineBasis, WindowProblem, estimate_window
from .metamodels import Metamodel, compile_inference, warm_up


@dataclass
class MonitoringRecord:
    """One adjudicated frame. ``support`` is only filled on alarms; the
    per-width statistics and candidate supports allow relabelling under
    another limit without recomputation."""

    t: int
    stat: float
    alarm: bool
    support: tuple[int, ...] = ()
    w_used: int = -1
    by_width: tuple[tuple[int, float, tuple[int, ...]], ...] = ()

    def under(self, L: float) -> "MonitoringRecord":
        hit = next(((w, sup) for w, s, sup in self.by_width if s > L), None)
        if hit is None:
            return MonitoringRecord(self.t, self.stat, False, (), -1, self.by_width)
        return MonitoringRecord(self.t, self.stat, True, hit[1], hit[0], self.by_width)


@dataclass
class ControlLimit:
    L: float
    target: float
    arl: float
    se: float
    n_replications: int
    bracket: tuple[float, float] = (math.nan, math.nan)


class CalibrationError(RuntimeError):
    pass


# ---------------------------------------------------------------- statistics


def lrt_statistic(theta, residual, basis) -> float:
    """``2 theta' B' r - theta' B' B theta``."""
    B = basis.matrix if isinstance(basis, SplineBasis) else np.asarray(basis, dtype=float)
    theta = np.asarray(theta, dtype=float)
    r = np.asarray(residual, dtype=float)
    if B.shape != (r.shape[0], theta.shape[0]):
        raise ValueError(f"basis {B.shape} does not match residual {r.shape} / theta {theta.shape}")
    Bt = B @ theta
    return float(2.0 * Bt @ r - Bt @ Bt)


def support_from_field(a: np.ndarray) -> tuple[int, ...]:
    """Cells where ``|a|`` exceeds half its maximum."""
    mag = np.abs(a)
    top = mag.max() if mag.size else 0.0
    if top <= 0:
        return ()
    return tuple(int(i) for i in np.nonzero(mag > 0.5 * top)[0])


def otsu_threshold(values, bins: int = 256) -> float:
    """Cut maximising the between-class variance of a ``bins``-bin histogram."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("no values")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        return lo
    counts, edges = np.histogram(v - lo, bins=bins, range=(0.0, hi - lo))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(counts)[:-1].astype(float)
    w1 = v.size - w0
    s0 = np.cumsum(counts * centers)[:-1]
    m0 = s0 / np.where(w0 > 0, w0, 1)
    m1 = (np.sum(counts * centers) - s0) / np.where(w1 > 0, w1, 1)
    between = w0 * w1 * (m0 - m1) ** 2
    k = int(np.argmax(between))
    return lo + float(edges[k + 1])


def otsu_support(residual: np.ndarray) -> tuple[int, ...]:
    mag = np.abs(residual)
    thr = otsu_threshold(mag)
    return tuple(int(i) for i in np.nonzero(mag > thr)[0])


def hotelling_t2(stream: np.ndarray, n_prefix: int, floor: float = 1e-8):
    """Per-frame T^2 of the time-differenced stream under a diagonal covariance
    estimated on the first ``n_prefix`` differenced frames.

    Returns ``(stats, standardized)``; row 0 has no difference and scores 0.
    """
    y = np.asarray(stream, dtype=float)
    d = np.diff(y, axis=0)
    if n_prefix < 2 or n_prefix > d.shape[0]:
        raise ValueError("prefix must hold at least 2 differenced frames")
    mean = d[:n_prefix].mean(axis=0)
    var = np.maximum(d[:n_prefix].var(axis=0, ddof=1), floor)
    z = (d - mean) / np.sqrt(var)
    stats = np.concatenate([[0.0], np.sum(z * z, axis=1)])
    return stats, np.vstack([np.zeros((1, y.shape[1])), z])


# ---------------------------------------------------------------- run lengths


@dataclass
class RunRecord:
    """Strict running maxima of one statistic stream (enough to get the run
    length for any limit)."""

    values: np.ndarray
    index: np.ndarray  # 1-based
    length: int

    @classmethod
    def of(cls, stats) -> "RunRecord":
        s = np.asarray(stats, dtype=float)
        if s.size == 0:
            return cls(np.empty(0), np.empty(0, dtype=int), 0)
        run_max = np.maximum.accumulate(s)
        new = np.ones(s.size, dtype=bool)
        new[1:] = run_max[1:] > run_max[:-1]
        idx = np.nonzero(new)[0]
        return cls(s[idx], idx + 1, s.size)

    def run_length(self, L: float) -> tuple[int, bool]:
        """``(run length, censored)`` for limit ``L``."""
        k = np.searchsorted(self.values, L, side="right")
        if k >= self.values.size:
            return self.length, True
        return int(self.index[k]), False


def arl_estimate(records: Sequence[RunRecord], L: float) -> tuple[float, float]:
    """Truncated-run ARL (total observed time over alarms) and its MC s.e."""
    rl = np.empty(len(records))
    alarms = 0
    for i, r in enumerate(records):
        rl[i], cens = r.run_length(L)
        alarms += not cens
    arl = rl.sum() / alarms if alarms else math.inf
    se = float(rl.std(ddof=1) / math.sqrt(rl.size)) if rl.size > 1 else math.nan
    return float(arl), se


def calibrate_control_limit(streams: Iterable | Callable[[np.random.Generator], np.ndarray],
                            target: float, tol: float = 0.02, rng: np.random.Generator | None = None,
                            n_replications: int | None = None, max_iter: int = 200) -> ControlLimit:
    """Bisection on ``L`` until the Monte-Carlo ARL0 is within ``tol * target``.

    ``streams`` is either an iterable of in-control statistic sequences or a
    generator ``f(rng) -> sequence`` called ``n_replications`` times. All
    candidate limits are scored on the same sequences.
    """
    if callable(streams):
        if n_replications is None:
            raise ValueError("n_replications is required with a generator")
        rng = rng or np.random.default_rng(0)
        records = [RunRecord.of(streams(rng)) for _ in range(n_replications)]
    else:
        records = [RunRecord.of(s) for s in streams]
    records = [r for r in records if r.length]
    if not records:
        raise CalibrationError("no in-control statistics")
    lo = min(float(r.values[0]) for r in records)
    hi = max(float(r.values[-1]) for r in records)
    lo -= 1.0 + abs(lo) * 1e-6
    n = len(records)
    if target <= 1:
        arl, se = arl_estimate(records, lo)
        return ControlLimit(lo, target, arl, se, n, (lo, hi))
    # one alarm in all observed frames is the largest finite estimate
    if sum(r.length for r in records) < target:
        raise CalibrationError(f"target ARL0 {target} exceeds the {sum(r.length for r in records)} "
                               "in-control frames available")
    a, b = lo, hi
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        arl, se = arl_estimate(records, mid)
        if abs(arl - target) <= tol * target:
            return ControlLimit(mid, target, arl, se, n, (lo, hi))
        if arl < target:
            a = mid
        else:
            b = mid
        if b - a <= 1e-12 * max(1.0, abs(b)):
            break
    arl, se = arl_estimate(records, b)
    return ControlLimit(b, target, arl, se, n, (lo, hi))


# ---------------------------------------------------------------- stream monitors


@dataclass
class StreamSetup:
    """Observed stream plus the regular stimulus increments on its clock."""

    y: np.ndarray  # (N, p)
    stim: np.ndarray  # (N, p)
    warmup: int = 32

    def __post_init__(self):
        if self.y.shape != self.stim.shape:
            raise ValueError("stream and stimulus shapes differ")
        if self.y.shape[0] <= self.warmup + 1 or self.warmup < 1:
            raise ValueError("stream shorter than the warm-up")


def _warm(model: Metamodel, s: StreamSetup, tp):
    return warm_up(model, s.y[:s.warmup - 1], s.stim[1:s.warmup], tp=tp)


def monitor_stream(setup: StreamSetup, model: Metamodel, basis: SplineBasis, L: float,
                   windows: Sequence[int] = (0,), gamma: float = 1.0, step: float = 0.01,
                   epochs: int = 5, keep_coefficients: bool = False):
    """Decomposition-based monitor.

    At each frame ``T`` the window problems ``T..T+w`` for every ``w`` in
    ``windows`` are solved; the recorded statistic is the largest of their
    LRT values at ``T`` and ``w_used`` is the smallest width crossing ``L``.
    The mean then advances with the estimate of the widest window, so the
    statistic path does not depend on ``L``.
    """
    windows = sorted(set(int(w) for w in windows))
    if not windows or windows[0] < 0:
        raise ValueError("window widths must be non-negative")
    tp = model.tensors()
    B = basis.matrix
    y, stim = setup.y, setup.stim
    N = y.shape[0]
    carry = _warm(model, setup, tp)
    mu = y[setup.warmup - 1].copy()
    records: list[MonitoringRecord] = []
    coeffs: list[AnomalyCoefficients] = []
    for t in range(setup.warmup, N - windows[-1]):
        stats, thetas = [], []
        for w in windows:
            prob = WindowProblem(t, y[t:t + w + 1], carry, mu, stim[t:t + w + 1])
            est = estimate_window(prob, model, basis, gamma, step, epochs, tp)
            thetas.append(est)
        th0 = [e.values[0] for e in thetas]
        c_nom = stim[t].reshape(1, -1)
        c_prev = carry
        carry_nom, g = model.step(c_prev, mu.reshape(1, -1), c_nom, tp)
        resid = y[t] - mu - g.data[0] - stim[t]
        for th in th0:
            stats.append(lrt_statistic(th, resid, B) if th.any() else 0.0)
        stat = max(stats)
        theta_t = th0[-1]
        if theta_t.any():
            c = c_nom + (B @ theta_t).reshape(1, -1)
            carry, g = model.step(c_prev, mu.reshape(1, -1), c, tp)
        else:
            c, carry = c_nom, carry_nom
        mu = mu + g.data[0] + c[0]
        by_width = tuple((w, s_, support_from_field(B @ th)) for w, s_, th in zip(windows, stats, th0))
        records.append(MonitoringRecord(t, stat, False, (), -1, by_width).under(L))
        if keep_coefficients:
            coeffs.append(AnomalyCoefficients(t, theta_t.reshape(1, -1)))
    return (records, coeffs) if keep_coefficients else records


def residual_monitor(setup: StreamSetup, model: Metamodel, L: float = math.inf):
    """Prediction-only monitor: free-running mean, statistic ``||y_t - mu_t||^2``,
    support by Otsu's threshold on ``|y_t - mu_t|``."""
    fast = compile_inference(model)
    y, stim = setup.y, setup.stim
    carry = fast.start(y[0])
    for j in range(setup.warmup - 1):
        carry, _ = fast.step(carry, y[j], stim[j + 1])
    mu = y[setup.warmup - 1].copy()
    records = []
    for t in range(setup.warmup, y.shape[0]):
        carry, g = fast.step(carry, mu, stim[t])
        mu = mu + g[0] + stim[t]
        r = y[t] - mu
        stat = float(r @ r)
        rec = MonitoringRecord(t, stat, False, (), -1, ((0, stat, otsu_support(r)),))
        records.append(rec.under(L))
    return records


def hotelling_monitor(setup: StreamSetup, L: float = math.inf):
    stats, z = hotelling_t2(setup.y, setup.warmup - 1)
    records = []
    for t in range(setup.warmup, setup.y.shape[0]):
        rec = MonitoringRecord(t, float(stats[t]), False, (), -1,
                               ((0, float(stats[t]), otsu_support(z[t])),))
        records.append(rec.under(L))
    return records


def relabel(records: list[MonitoringRecord], L: float) -> list[MonitoringRecord]:
    """Alarm flags of an existing statistic path under a different limit."""
    return [r.under(L) for r in records]


def buffer_window_sweep(setup: StreamSetup, t: int, carry, mu, model: Metamodel,
                        basis: SplineBasis, L: float, w_max: int, gamma: float,
                        step: float = 0.01, epochs: int = 5, tp=None):
    """Widths ``0..w_max`` at frame ``t``; first ``(w, coefficients)`` whose
    statistic exceeds ``L``, or ``None``."""
    tp = tp or model.tensors()
    _, g = model.step(carry, mu.reshape(1, -1), setup.stim[t].reshape(1, -1), tp)
    resid = setup.y[t] - mu - g.data[0] - setup.stim[t]
    for w in range(w_max + 1):
        if t + w >= setup.y.shape[0]:
            break
        prob = WindowProblem(t, setup.y[t:t + w + 1], carry, mu, setup.stim[t:t + w + 1])
        est = estimate_window(prob, model, basis, gamma, step, epochs, tp)
        if est.values[0].any() and lrt_statistic(est.values[0], resid, basis) > L:
            return w, est
    return None


def write_monitoring_csv(path, records: list[MonitoringRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "T_t", "alarm", "w_used", "support"])
        for r in records:
            w.writerow([r.t, repr(r.stat), int(r.alarm), r.w_used, ";".join(map(str, r.support))])
