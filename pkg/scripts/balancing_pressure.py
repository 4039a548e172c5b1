"""Final-window CV^2(importance) with and without the load-balancing term."""
import argparse
import json

import numpy as np

from clasp.dataset import build_datasets
from clasp.losses import LossWeights
from clasp.trainer import TrainConfig, run_pretraining


def final_cv2(history, window):
    return float(np.mean([np.mean(r.cv2_importance) for r in history[-window:]]))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--window", type=int, default=50)
    ap.add_argument("--lambdas", default="1,0")
    ap.add_argument("--json", default=None)
    args = ap.parse_args()

    lams = [float(x) for x in args.lambdas.split(",")]
    out = {}
    for seed in [int(s) for s in args.seeds.split(",")]:
        base = TrainConfig(seed=seed, steps=args.steps, deterministic=True, schedule="clasp", diag_every=0)
        data = build_datasets(base.data, seed, base.image_hw, base.final_grid)
        vals = []
        for lam in lams:
            cfg = TrainConfig(**{**base.__dict__, "weights": LossWeights(balancing=lam)})
            vals.append(final_cv2(run_pretraining(cfg, data=data).history, args.window))
        out[seed] = dict(zip(map(str, lams), vals))
        print(f"seed {seed}: " + "  ".join(f"lambda4={lam:g}: {v:.4f}" for lam, v in zip(lams, vals)))
    if args.json:
        with open(args.json, "w") as f:
            json.dump(out, f, indent=1)


if __name__ == "__main__":
    main()
