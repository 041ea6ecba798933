"""Correspondence accuracy of MMCL against single-margin contrastive loss on shared training sets.

    python scripts/loss_comparison.py --hard-rich
"""

import argparse
from dataclasses import replace
from statistics import median

from patchdesc.experiments import ToySetup, describe_corpus, mine, score, toy_split, train_toy
from patchdesc.model import LossConfig

LOSSES = ("mmcl", "contrastive", "hinge")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--losses", nargs="+", choices=LOSSES, default=["mmcl", "contrastive"])
    ap.add_argument("--hard-rich", action="store_true", help="as many hard negatives as positives")
    args = ap.parse_args()

    setup = ToySetup()
    if args.hard_rich:
        setup = replace(setup, soft_budget=480, hard_budget=960, cross_model_pairs=64)
    acc = {k: [] for k in args.losses}
    for seed in args.seeds:
        split = toy_split(setup, seed)
        ts = mine(split, setup, seed)
        cells = []
        for kind in args.losses:
            run = train_toy(split, setup, LossConfig(kind=kind), seed, ts)
            rep = score(describe_corpus(run.params, split.corpus, setup.patch), split, setup)
            acc[kind].append(rep.corr_accuracy)
            cells.append(f"{kind} acc {rep.corr_accuracy:.3f} cmc {rep.cmc_at(setup.k):.3f}")
        print(f"seed {seed}  pos {len(ts.positives)} soft {len(ts.soft)} hard {len(ts.hard)}  " + "  ".join(cells),
              flush=True)
    print("median accuracy  " + "  ".join(f"{k}: {median(v):.3f}" for k, v in acc.items()))


if __name__ == "__main__":
    main()
