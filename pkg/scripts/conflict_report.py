"""Gradient conflict ratio and expert-activation divergence over a multi-task run."""
import argparse
import math

from clasp.dataset import build_datasets
from clasp.trainer import TrainConfig, run_pretraining


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--every", type=int, default=20)
    ap.add_argument("--out", default=None, help="also write checkpoint, metrics and the last trace here")
    args = ap.parse_args()

    cfg = TrainConfig(seed=args.seed, steps=args.steps, deterministic=True, schedule="clasp", diag_every=args.every)
    data = build_datasets(cfg.data, cfg.seed, cfg.image_hw, cfg.final_grid)
    state = run_pretraining(cfg, out_dir=args.out, data=data)
    print(f"{'step':>5} {'gcr':>7} {'dino|part':>10} {'dino|attr':>10} {'part|attr':>10}")
    for r in state.history:
        if math.isnan(r.gcr):
            continue
        e = r.ead
        print(f"{r.step:5d} {r.gcr:7.3f} {e['dino|part']:10.4f} {e['dino|attribute']:10.4f} {e['part|attribute']:10.4f}")


if __name__ == "__main__":
    main()
