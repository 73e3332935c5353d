"""On-disk formats for fields, schedules and ground truth.

Field binary layout (little-endian)::

    b"STSD" | u32 version=1 | u64 n_time | u64 n_space | f64 dt | f64[n_time*n_space]

Schedules and ground truth are line-oriented text, one record per line with
fields comma-separated in declaration order. Set-valued fields use ``;``.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .cable import AnomalyGroundTruth, SpatioTemporalField, StimulationSchedule, StimulusEvent

FIELD_MAGIC = b"STSD"
FIELD_VERSION = 1
_HEADER = struct.Struct("<4sIQQd")


class FormatError(ValueError):
    pass


def write_field(path, fld: SpatioTemporalField) -> None:
    n_t, n_s = fld.values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, n_t, n_s, float(fld.dt)))
        fh.write(np.ascontiguousarray(fld.values, dtype="<f8").tobytes())


def read_field(path) -> SpatioTemporalField:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n_t, n_s, dt = _HEADER.unpack_from(raw)
    if magic != FIELD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FIELD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * n_t * n_s:
        raise FormatError(f"{path}: expected {n_t * n_s} values, found {len(body) // 8}")
    vals = np.frombuffer(body, dtype="<f8").reshape(n_t, n_s).astype(np.float64)
    return SpatioTemporalField(vals, dt)


def write_field_csv(path, fld: SpatioTemporalField) -> None:
    n_t, n_s = fld.values.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "s", "value"])
        for t in range(n_t):
            for s in range(n_s):
                w.writerow([t, s, repr(float(fld.values[t, s]))])


def read_field_csv(path, dt: float = 1.0) -> SpatioTemporalField:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0].astype(int)
    s = data[:, 1].astype(int)
    vals = np.zeros((t.max() + 1, s.max() + 1))
    vals[t, s] = data[:, 2]
    return SpatioTemporalField(vals, dt)


def write_schedule(path, schedule: StimulationSchedule) -> None:
    with open(path, "w") as fh:
        for e in schedule.events:
            fh.write(f"{e.t_start!r},{e.cell_start},{e.n_cells},{e.duration!r},{e.amplitude!r},{e.kind}\n")


def read_schedule(path) -> StimulationSchedule:
    events = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise FormatError(f"{path}:{n}: expected 6 fields, got {len(parts)}")
        t0, c0, nc, dur, amp, kind = parts
        if kind not in ("regular", "abnormal"):
            raise FormatError(f"{path}:{n}: unknown kind {kind!r}")
        events.append(StimulusEvent(float(t0), int(c0), int(nc), float(dur), float(amp), kind))
    return StimulationSchedule(events)


def write_ground_truth(path, truths: list[AnomalyGroundTruth]) -> None:
    with open(path, "w") as fh:
        for g in truths:
            cells = ";".join(str(c) for c in g.cells)
            times = ";".join(repr(float(t)) for t in g.times)
            fh.write(f"{cells},{times},{g.delta!r}\n")


def read_ground_truth(path) -> list[AnomalyGroundTruth]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.strip().split(",")
        if len(parts) != 3:
            raise FormatError(f"{path}:{n}: expected 3 fields")
        cells = tuple(int(c) for c in parts[0].split(";"))
        times = tuple(float(t) for t in parts[1].split(";"))
        out.append(AnomalyGroundTruth(cells, times, float(parts[2])))
    return out
