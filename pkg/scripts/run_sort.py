#!/usr/bin/env python3
"""Train the desk-scale priority sort experiment.

An encoder-decoder consumes 8 random 6-bit vectors with scalar
priorities and emits them in ascending priority order.  Training stops
early once held-out bit error clears the target.
"""

import argparse

from mgmem import configs
from mgmem.training import train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/sort")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=12_500)
    ap.add_argument("--length", type=int, default=8)
    ap.add_argument("--dim", type=int, default=6)
    args = ap.parse_args()
    cfg = configs.sort_config(out_dir=args.out, seed=args.seed, length=args.length,
                              dim=args.dim, total_steps=args.steps)
    result = train(cfg)
    print(f"steps_run={result.steps_run}")
    print(f"final_eval={result.final_eval}")
    print(f"checkpoint={result.checkpoint_path}")


if __name__ == "__main__":
    main()
