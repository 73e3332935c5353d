"""Cable constants: conduction speed against D and the time-step refinement error.

    python scripts/calibrate_cable.py [--cells 300]

Prints the pulse speed (cells/ms) for a few diffusion values, then the max
change of the recorded field when the internal step is halved.
"""

import argparse

import numpy as np

from dstsd.cable import CableConfig, StimulationSchedule, StimulusEvent, simulate


def pulse(n, duration, **kw):
    cfg = CableConfig(n_cells=n, duration=duration, **kw)
    ev = StimulationSchedule([StimulusEvent(0.0, 0, 3, 2.0, 5.0)])
    return simulate(cfg, ev).values


def speed(u):
    n = u.shape[1]
    cells = np.arange(n // 3, 2 * n // 3)
    arrival = [np.argmax(u[:, c] > 0.0) for c in cells]
    return np.polyfit(arrival, cells, 1)[0]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cells", type=int, default=300)
    args = ap.parse_args()
    n = args.cells
    print("D     cells/ms  ms for 1500 cells")
    for D in (2.0, 4.0, 6.0, 8.0):
        v = speed(pulse(n, n / 1.0, diffusion=D))
        print(f"{D:<5} {v:8.3f}  {1500 / v:8.0f}")
    print("\ndt_internal  max |u(dt) - u(dt/2)|  (40 cells, 30 ms)")
    for dt in (0.02, 0.01, 0.005, 0.0025, 0.00125):
        a = pulse(40, 30, dt_internal=dt)
        b = pulse(40, 30, dt_internal=dt / 2)
        print(f"{dt:<12g} {np.abs(a - b).max():.3g}")


if __name__ == "__main__":
    main()
