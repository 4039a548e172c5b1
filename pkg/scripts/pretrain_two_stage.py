"""Stage 1 (pure DINO) then stage 2 (all four losses, warm-started at reduced lr)."""
import argparse
from dataclasses import replace
from pathlib import Path

from clasp.config import load_json_config
from clasp.dataset import build_datasets
from clasp.trainer import TrainConfig, evaluate_dino, init_state, apply_warm_start, run_pretraining


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--stage1-steps", type=int, default=200)
    ap.add_argument("--stage2-steps", type=int, default=200)
    ap.add_argument("--out", default="runs/two_stage")
    ap.add_argument("--noise", action="store_true", help="keep gate noise on")
    args = ap.parse_args()

    base = load_json_config(TrainConfig, args.config) if args.config else TrainConfig()
    base = replace(base, seed=args.seed, deterministic=not args.noise)
    out = Path(args.out)
    data = build_datasets(base.data, base.seed, base.image_hw, base.final_grid)

    s1_cfg = replace(base, steps=args.stage1_steps, warm_start_checkpoint=None)
    s1 = run_pretraining(s1_cfg, out_dir=out / "stage1", data=data)
    h1 = s1.history
    print(f"stage 1: total {h1[0].total:.4f} -> {h1[-1].total:.4f} ({1 - h1[-1].total / h1[0].total:.1%} drop)")

    ck = out / "stage1" / "checkpoint.ckpt"
    s2_cfg = replace(base, steps=args.stage2_steps, warm_start_checkpoint=str(ck))
    probe = init_state(s2_cfg)
    apply_warm_start(probe, ck)
    held = data[1]
    print(f"warm start: held-out DINO {evaluate_dino(s1, held):.4f} (stage-1 end) vs {evaluate_dino(probe, held):.4f} (stage-2 start)")

    s2 = run_pretraining(s2_cfg, out_dir=out / "stage2", data=data)
    h2 = s2.history
    print(f"stage 2: first-step DINO {h2[0].dino:.4f} vs stage-1 last-step {h1[-1].dino:.4f}")
    r = h2[-1]
    print(f"stage 2 final: dino {r.dino:.4f} part {r.part:.4f} attr {r.attribute:.4f} bal {r.balancing:.5f} total {r.total:.4f}")
    print(f"outputs in {out}")


if __name__ == "__main__":
    main()
