"""Spread of fitted (V, t0, sigma) over synthetic experiments vs the reference table."""
import argparse

import numpy as np

from homtest.synthetic import GROUPS, REFERENCE_TABLE, fitted_quantities, synthetic_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    samples = {g: [] for g in (*GROUPS, "whole")}
    for _ in range(args.runs):
        for g, q in fitted_quantities(synthetic_experiment(rng)).items():
            samples[g].append(q)
    print(f"{'group':<12} {'std V':>14} {'std t0':>14} {'std sigma':>14}   (simulated / reference)")
    for g, rows in samples.items():
        sd = np.std(rows, axis=0)
        ref = REFERENCE_TABLE[g]
        cells = [f"{a:.3f}/{b:.3f}" for a, b in zip(sd, (ref.std_V, ref.std_t0, ref.std_sigma))]
        print(f"{g:<12} " + " ".join(f"{c:>14}" for c in cells))


if __name__ == "__main__":
    main()
