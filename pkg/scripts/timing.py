"""Wall time of one metamodel step against the simulator advancing one recorded frame.

    python scripts/timing.py [--cells 300]
"""

import argparse
import time

import numpy as np

from dstsd.cable import CableConfig, simulate
from dstsd.metamodels import build_model, compile_inference


def per_step(fn, reps):
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cells", type=int, default=300)
    args = ap.parse_args()
    n = args.cells
    t0 = time.perf_counter()
    simulate(CableConfig(n_cells=n, duration=101))
    sim = (time.perf_counter() - t0) / 100
    print(f"simulator   {sim * 1e3:8.3f} ms per frame")
    x = np.random.default_rng(0).normal(size=n)
    zero = np.zeros(n)
    for arch in ("convlstm", "convwavenet"):
        fast = compile_inference(build_model(arch))
        state = [fast.start(x)]

        def step():
            state[0], _ = fast.step(state[0], x, zero)

        t = per_step(step, 500)
        print(f"{arch:<11} {t * 1e3:8.3f} ms per step  ({sim / t:.1f}x faster)")


if __name__ == "__main__":
    main()
