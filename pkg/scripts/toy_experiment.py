"""Train MMCL on the synthetic toy corpus and compare against random-init and histogram descriptors.

    python scripts/toy_experiment.py --seeds 0 1 2 3 4
"""

import argparse
from statistics import median

from patchdesc.experiments import ToySetup, efficacy_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=ToySetup.epochs)
    args = ap.parse_args()

    setup = ToySetup(epochs=args.epochs)
    rows = []
    print("seed  trained  random  histogram  seconds")
    for seed in args.seeds:
        s = efficacy_seed(setup, seed).scores
        rows.append(s)
        print(f"{seed:4d}  {s['trained']:7.3f}  {s['random']:6.3f}  {s['histogram']:9.3f}  {s['seconds']:7.1f}")
    med = {k: median(r[k] for r in rows) for k in ("trained", "random", "histogram")}
    print(f"median CMC@{setup.k}: trained {med['trained']:.3f}, random-init {med['random']:.3f}, "
          f"histogram {med['histogram']:.3f}")


if __name__ == "__main__":
    main()
