"""FitzHugh-Nagumo reaction-diffusion on a 1-D cable.

    du/dt = D d2u/ds2 + u - u**3/3 - v + c(t, s)
    dv/dt = eps * (u + beta - gamma * v)

Explicit Euler in time, central differences in space (unit cell spacing),
zero-flux ends. Time is in ms. The recorded field holds ``u`` sampled every
``dt_record``; frame ``k`` is the state at ``t = k * dt_record``.

Stimulus bookkeeping: an event active on ``[t_start, t_start + duration)``
enters the frames whose preceding interval it overlaps, so a 2 ms event
starting at ``t0`` shows up in frames ``t0 + 1`` and ``t0 + 2`` at 1 ms
recording.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CableConfig:
    n_cells: int = 1500
    dt_internal: float = 0.0025
    dt_record: float = 1.0
    # D = 6 gives ~2 cells/ms, i.e. 1500 cells in ~750 ms (scripts/calibrate_cable.py)
    diffusion: float = 6.0
    eps: float = 0.08
    beta: float = 0.7
    gamma: float = 0.8
    cubic: float = 3.0
    duration: float = 1000.0
    rng_seed: int = 0
    blowup: float = 1e3

    @property
    def substeps(self) -> int:
        return int(round(self.dt_record / self.dt_internal))

    @property
    def n_time(self) -> int:
        return int(round(self.duration / self.dt_record))

    @property
    def stability_ratio(self) -> float:
        return self.diffusion * self.dt_internal  # cell spacing is 1

    def validate(self) -> None:
        if self.n_cells < 3:
            raise ValueError("need at least 3 cells")
        if self.dt_internal <= 0 or self.dt_record <= 0:
            raise ValueError("time steps must be positive")
        if self.dt_internal > self.dt_record:
            raise ValueError("dt_internal must not exceed dt_record")
        if not math.isclose(self.substeps * self.dt_internal, self.dt_record, rel_tol=1e-9):
            raise ValueError("dt_record must be an integer multiple of dt_internal")
        if self.stability_ratio >= 0.5:
            raise ValueError(f"unstable: D*dt/ds^2 = {self.stability_ratio:.3f} >= 0.5")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    def rest_state(self) -> tuple[float, float]:
        """Resting (u, v): intersection of the two nullclines."""
        f = lambda u: u - u ** 3 / self.cubic - (u + self.beta) / self.gamma
        u = brentq(f, -10.0, 10.0, xtol=1e-15)
        return u, (u + self.beta) / self.gamma


@dataclass
class SpatioTemporalField:
    """Row-major (time x space) matrix of potentials."""

    values: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("field must be 2-D (time x space)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    @property
    def n_time(self) -> int:
        return self.values.shape[0]

    @property
    def n_space(self) -> int:
        return self.values.shape[1]

    def window(self, start: int, stop: int) -> "SpatioTemporalField":
        return SpatioTemporalField(self.values[start:stop].copy(), self.dt)


@dataclass(frozen=True)
class StimulusEvent:
    t_start: float
    cell_start: int
    n_cells: int
    duration: float
    amplitude: float
    kind: str = "regular"  # "regular" | "abnormal"

    def overlaps(self, other: "StimulusEvent") -> bool:
        cells = (self.cell_start < other.cell_start + other.n_cells
                 and other.cell_start < self.cell_start + self.n_cells)
        times = (self.t_start < other.t_start + other.duration
                 and other.t_start < self.t_start + self.duration)
        return cells and times


@dataclass
class StimulationSchedule:
    events: list[StimulusEvent] = field(default_factory=list)

    def regular(self) -> "StimulationSchedule":
        return StimulationSchedule([e for e in self.events if e.kind == "regular"])

    def abnormal(self) -> "StimulationSchedule":
        return StimulationSchedule([e for e in self.events if e.kind == "abnormal"])

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class AnomalyGroundTruth:
    cells: tuple[int, ...]      # S_A
    times: tuple[float, ...]    # S_T, ms at which the abnormal stimulus is on
    delta: float

    def frames(self, dt_record: float = 1.0) -> tuple[int, ...]:
        """Recorded frames whose increment carries the stimulus."""
        return tuple(int(round(t / dt_record)) + 1 for t in self.times)

    def points(self, dt_record: float = 1.0) -> set[tuple[int, int]]:
        return {(t, s) for t in self.frames(dt_record) for s in self.cells}


# ---------------------------------------------------------------- stimulus


def stimulus_field(schedule: StimulationSchedule, n_time: int, n_space: int,
                   dt_record: float = 1.0, kinds=("regular",)) -> np.ndarray:
    """Per-frame stimulus increment: integral of c(t, s) over the interval
    ending at each frame. Row 0 is zero."""
    out = np.zeros((n_time, n_space))
    for e in schedule.events:
        if e.kind not in kinds:
            continue
        a, b = e.t_start, e.t_start + e.duration
        k0 = max(1, int(math.floor(a / dt_record)) + 1)
        k1 = min(n_time - 1, int(math.ceil(b / dt_record)))
        for k in range(k0, k1 + 1):
            lo, hi = (k - 1) * dt_record, k * dt_record
            overlap = min(hi, b) - max(lo, a)
            if overlap > 0:
                out[k, e.cell_start:e.cell_start + e.n_cells] += e.amplitude * overlap
    return out


def _check_schedule(config: CableConfig, schedule: StimulationSchedule) -> None:
    for e in schedule.events:
        if e.cell_start < 0 or e.n_cells < 1 or e.cell_start + e.n_cells > config.n_cells:
            raise ValueError(f"stimulus cells out of cable: {e}")
        if e.duration <= 0 or e.t_start < 0:
            raise ValueError(f"bad stimulus timing: {e}")


def simulate(config: CableConfig, schedule: StimulationSchedule | None = None,
             initial: tuple[np.ndarray, np.ndarray] | None = None) -> SpatioTemporalField:
    """Integrate the cable and return ``u`` at the recording cadence."""
    config.validate()
    schedule = schedule or StimulationSchedule()
    _check_schedule(config, schedule)
    n, dt, sub = config.n_cells, config.dt_internal, config.substeps
    D, eps, beta, gam, cub = (config.diffusion, config.eps, config.beta,
                              config.gamma, config.cubic)
    if initial is None:
        u0, v0 = config.rest_state()
        u, v = np.full(n, u0), np.full(n, v0)
    else:
        u, v = (np.array(a, dtype=np.float64) for a in initial)

    n_time = config.n_time
    out = np.empty((n_time, n))
    out[0] = u
    lap = np.empty(n)
    du = np.empty(n)
    c = np.zeros(n)
    events = sorted(schedule.events, key=lambda e: e.t_start)

    # overflow inside one recorded interval is reported as a blow-up below
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, n_time):
            t_lo = (k - 1) * config.dt_record
            t_hi = k * config.dt_record
            live = [e for e in events if e.t_start < t_hi and e.t_start + e.duration > t_lo]
            for j in range(sub):
                t = t_lo + j * dt
                if live:
                    c.fill(0.0)
                    for e in live:
                        # half-step tolerance guards against rounding at the window edges
                        if e.t_start - 0.5 * dt <= t < e.t_start + e.duration - 0.5 * dt:
                            c[e.cell_start:e.cell_start + e.n_cells] += e.amplitude
                lap[1:-1] = u[:-2] - 2.0 * u[1:-1] + u[2:]
                lap[0] = 2.0 * (u[1] - u[0])
                lap[-1] = 2.0 * (u[-2] - u[-1])
                # du = D*lap + u - u^3/cub - v (+ c)
                np.multiply(u, u, out=du)
                du *= u
                du *= -1.0 / cub
                du += u
                du -= v
                du += D * lap
                if live:
                    du += c
                v += dt * eps * (u + beta - gam * v)
                u += dt * du
            if not np.all(np.abs(u) < config.blowup):
                raise SimulationError(
                    f"blow-up at t={t_hi} ms (D*dt/ds^2 = {config.stability_ratio:.3f})")
            out[k] = u
    return SpatioTemporalField(out, config.dt_record)


# ---------------------------------------------------------------- protocols


def make_protocol(case: str, cycle_ms: float, sites, duration: float,
                  amplitude: float = 5.0, stim_duration: float = 2.0,
                  n_cells: int = 3) -> StimulationSchedule:
    """Periodic regular stimulation: Case1 has one site, Case2 two."""
    case = case.lower().replace("case", "").strip()
    sites = list(sites)
    want = {"1": 1, "2": 2}.get(case)
    if want is None:
        raise ValueError(f"unknown protocol case {case!r}")
    if len(sites) != want:
        raise ValueError(f"Case{case} needs {want} site(s), got {len(sites)}")
    if not (200 <= cycle_ms <= 1000) or abs(cycle_ms / 100 - round(cycle_ms / 100)) > 1e-9:
        raise ValueError("cycle length must be 200..1000 ms in 100 ms steps")
    events = []
    t = 0.0
    while t < duration:
        for s in sites:
            events.append(StimulusEvent(t, int(s), n_cells, stim_duration, amplitude, "regular"))
        t += cycle_ms
    return StimulationSchedule(events)


def inject_anomalies(schedule: StimulationSchedule, n_anomalies: int, delta: float,
                     r0: float, rng: np.random.Generator, n_cells: int,
                     t_range: tuple[float, float], width: int = 3,
                     duration: float = 2.0, max_tries: int = 1000
                     ) -> tuple[StimulationSchedule, list[AnomalyGroundTruth]]:
    """Append ``n_anomalies`` abnormal stimuli of amplitude ``delta * r0``.

    Each spans ``width`` consecutive cells for ``duration`` ms starting at an
    integer ms in ``t_range``; supports never overlap each other.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if delta == 0 or n_anomalies == 0:
        return StimulationSchedule(list(schedule.events)), []
    if n_cells < width * n_anomalies:
        raise ValueError(f"cable of {n_cells} cells cannot hold {n_anomalies} anomalies")
    lo, hi = int(math.ceil(t_range[0])), int(math.floor(t_range[1] - duration))
    if hi < lo:
        raise ValueError("anomaly time range too short")
    placed: list[StimulusEvent] = []
    truths: list[AnomalyGroundTruth] = []
    tries = 0
    while len(placed) < n_anomalies:
        tries += 1
        if tries > max_tries:
            raise ValueError("could not place anomalies without overlap")
        s0 = int(rng.integers(0, n_cells - width + 1))
        t0 = float(rng.integers(lo, hi + 1))
        ev = StimulusEvent(t0, s0, width, duration, delta * r0, "abnormal")
        if any(ev.overlaps(o) for o in placed):
            continue
        placed.append(ev)
        steps = int(round(duration))
        truths.append(AnomalyGroundTruth(tuple(range(s0, s0 + width)),
                                         tuple(t0 + i for i in range(steps)), delta))
    return StimulationSchedule(list(schedule.events) + placed), truths


def add_noise(fld: SpatioTemporalField, sigma: float,
              rng: np.random.Generator) -> SpatioTemporalField:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return SpatioTemporalField(fld.values.copy(), fld.dt)
    return SpatioTemporalField(fld.values + rng.normal(0.0, sigma, fld.values.shape), fld.dt)


def with_duration(config: CableConfig, duration: float) -> CableConfig:
    return replace(config, duration=duration)
