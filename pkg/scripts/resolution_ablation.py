"""CMC@10 of one trained encoder on clouds subsampled to lower resolutions.

    python scripts/resolution_ablation.py --fractions 0.25 0.5 1.0
"""

import argparse
from statistics import median

from patchdesc.experiments import ToySetup, describe_corpus, resampled_split, score, toy_split, train_toy
from patchdesc.model import LossConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.25, 0.5, 1.0])
    args = ap.parse_args()

    setup = ToySetup()
    table = {f: [] for f in args.fractions}
    for seed in args.seeds:
        split = toy_split(setup, seed)
        run = train_toy(split, setup, LossConfig(kind="mmcl"), seed)
        cells = []
        for f in args.fractions:
            low = resampled_split(split, f, seed)
            v = score(describe_corpus(run.params, low.corpus, setup.patch), low, setup).cmc_at(setup.k)
            table[f].append(v)
            cells.append(f"{f:g}: {v:.3f}")
        print(f"seed {seed}  " + "  ".join(cells), flush=True)
    print("median  " + "  ".join(f"{f:g}: {median(v):.3f}" for f, v in table.items()))


if __name__ == "__main__":
    main()
