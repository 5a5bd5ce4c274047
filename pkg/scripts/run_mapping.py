#!/usr/bin/env python3
"""Train the desk-scale mapping & localization experiment.

A writer-reader network explores a 9x9 wall-free world along a spiral,
answering 3x3 localization queries on the 17x17 re-centered canvas.
Training stops early once the held-out F-score clears the target.
"""

import argparse

from mgmem import configs
from mgmem.training import train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/mapping")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=40_000)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--world", type=int, default=9)
    args = ap.parse_args()
    cfg = configs.mapping_config(out_dir=args.out, seed=args.seed, n=args.world,
                                 total_steps=args.steps, batch_size=args.batch)
    result = train(cfg)
    print(f"steps_run={result.steps_run}")
    print(f"final_eval={result.final_eval}")
    print(f"checkpoint={result.checkpoint_path}")


if __name__ == "__main__":
    main()
