"""Train the Conv-WaveNet metamodel and compare its rollout error to an untrained copy.

    python scripts/train_wavenet.py --out runs/wavenet [--epochs 60] [--lr 2e-3]
"""

import argparse
import dataclasses
from pathlib import Path

from dstsd.config import Config
from dstsd.evaluation import rmse, rollout_errors, train_or_load
from dstsd.metamodels import build_model, save_checkpoint
from dstsd.phase1 import Phase1Config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/wavenet")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = Config().with_seed(args.seed)
    cfg = dataclasses.replace(
        cfg,
        model=dataclasses.replace(cfg.model, arch="convwavenet"),
        phase1=Phase1Config(batch=3, sgd_epochs=0, adamw_epochs=args.epochs, adamw_lr=args.lr,
                            rng_seed=args.seed),
    )
    model, history = train_or_load(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.mdl", model)
    with open(out / "training_loss.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for i, loss in enumerate(history.epoch_loss):
            fh.write(f"{i},{loss!r}\n")
    trained = rmse(*rollout_errors(cfg, model))
    fresh = rmse(*rollout_errors(cfg, build_model("convwavenet", **cfg.model.hyper())))
    print(f"rollout rMSE trained {trained:.4g}, untrained {fresh:.4g}, ratio {fresh / trained:.1f}")


if __name__ == "__main__":
    main()
