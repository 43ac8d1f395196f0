"""Stage-0 overfit on a handful of synthetic clips; prints the windowed loss drop."""

import argparse
import json

import torch

from egocrash.trends import run_overfit


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/overfit")
    p.add_argument("--clips", type=int, default=4)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    torch.set_num_threads(1)
    res = run_overfit(args.out, n_clips=args.clips, steps=args.steps, seed=args.seed)
    print(json.dumps(res.__dict__, indent=1))


if __name__ == "__main__":
    main()
