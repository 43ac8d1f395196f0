"""Three-stage toy training followed by counterfactual AEdit, for one or more seeds.

For every seed this trains stages 0 and 1 once, then stage 2 with the full
block preset and with the ablation preset, and edits held-out clips by
swapping the entity word. Reports tube-vs-background pixel change and the
CLIP_s analog of both presets.
"""

import argparse
import json
import logging

import torch

from egocrash.trends import AEditConfig, majority, run_aedit


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/aedit")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps0", type=int, default=AEditConfig.steps0)
    p.add_argument("--steps1", type=int, default=AEditConfig.steps1)
    p.add_argument("--steps2", type=int, default=AEditConfig.steps2)
    p.add_argument("--strength", type=float, default=AEditConfig.strength)
    p.add_argument("--ablation", default=AEditConfig.ablation)
    p.add_argument("--all-seeds", action="store_true", help="keep going after the majority is decided")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    exp = AEditConfig(steps0=args.steps0, steps1=args.steps1, steps2=args.steps2, strength=args.strength,
                      ablation=args.ablation)
    seeds = [int(s) for s in args.seeds.split(",")]
    outcomes = []
    for seed in seeds:
        r = run_aedit(f"{args.out}/seed{seed}", seed=seed, exp=exp)
        outcomes.append(r.passed(exp.ratio_target))
        s = r.summary()
        print(json.dumps({k: v for k, v in s.items() if not k.startswith("edits")}))
        if not args.all_seeds and majority(outcomes, len(seeds)) is not None:
            break
    print("majority:", majority(outcomes, len(seeds)))


if __name__ == "__main__":
    main()
