"""200-step loss drop and warm-start continuity over several seeds."""
import argparse
import json
import tempfile

import numpy as np

from clasp.dataset import build_datasets
from clasp.trainer import TrainConfig, evaluate_dino, run_pretraining


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2,3,4,5")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--json", default=None)
    args = ap.parse_args()

    rows = []
    for seed in [int(s) for s in args.seeds.split(",")]:
        cfg = TrainConfig(seed=seed, steps=args.steps, deterministic=True)
        data = build_datasets(cfg.data, seed, cfg.image_hw, cfg.final_grid)
        with tempfile.TemporaryDirectory() as d:
            s1 = run_pretraining(cfg, out_dir=d, data=data)
            cfg2 = TrainConfig(seed=seed, steps=1, deterministic=True, warm_start_checkpoint=f"{d}/checkpoint.ckpt")
            s2 = run_pretraining(cfg2, data=data)
        h = s1.history
        end = evaluate_dino(s1, data[1])
        row = {
            "seed": seed,
            "drop": 1 - h[-1].total / h[0].total,
            "eval_dino": end,
            "train_rel": abs(s2.history[0].dino - h[-1].dino) / h[-1].dino,
        }
        rows.append(row)
        print(f"seed {seed}: drop {row['drop']:.3f}  held-out DINO {end:.4f}  "
              f"stage-2 first-step vs stage-1 last-step {row['train_rel']:.3f}")
    drops = np.array([r["drop"] for r in rows])
    print(f"drop mean {drops.mean():.3f}  min {drops.min():.3f}  >= 0.30 in {(drops >= 0.3).sum()}/{len(drops)}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)


if __name__ == "__main__":
    main()
