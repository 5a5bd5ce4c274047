#!/usr/bin/env python3
"""Train the desk-scale associative recall experiment.

A writer consumes 6 distinct 6-bit vectors; at the final step the
reader receives a repeat of one of the first five and must output its
successor.  Training stops early once held-out bit error clears the
target.
"""

import argparse

from mgmem import configs
from mgmem.training import train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/recall")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=50_000)
    ap.add_argument("--length", type=int, default=6)
    ap.add_argument("--dim", type=int, default=6)
    args = ap.parse_args()
    cfg = configs.recall_config(out_dir=args.out, seed=args.seed, length=args.length,
                                dim=args.dim, total_steps=args.steps)
    result = train(cfg)
    print(f"steps_run={result.steps_run}")
    print(f"final_eval={result.final_eval}")
    print(f"checkpoint={result.checkpoint_path}")


if __name__ == "__main__":
    main()
