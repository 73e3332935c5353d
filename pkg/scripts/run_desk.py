"""Desk-scale experiment: train, calibrate, monitor and score.

    python scripts/run_desk.py --out runs/desk [--config my.ini] [--deltas 0.15,0.25,0.35]

Equivalent to ``dstsd evaluate`` but lets the delta grid and replication count
be overridden from the command line.
"""

import argparse
import dataclasses
import logging

from dstsd.config import Config, load_config
from dstsd.evaluation import run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--deltas", default=None, help="comma-separated")
    ap.add_argument("--replications", type=int, default=None)
    ap.add_argument("--no-streams", action="store_true", help="skip per-stream monitoring CSVs")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = load_config(args.config) if args.config else Config()
    if args.replications:
        cfg = dataclasses.replace(cfg, experiment=dataclasses.replace(
            cfg.experiment, replications=args.replications))
    deltas = tuple(float(d) for d in args.deltas.split(",")) if args.deltas else None
    out = run_experiment(cfg, args.out, deltas=deltas, write_streams=not args.no_streams)
    print((out / "summary.md").read_text())


if __name__ == "__main__":
    main()
