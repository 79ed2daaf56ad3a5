"""Tabulate weak-pulse HOM visibility against mean photon number and mode overlap."""
import argparse

import numpy as np

from homtest import optics


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--overlaps", default="1.0,0.9,0.5")
    ap.add_argument("--mu-min", type=float, default=1e-3)
    ap.add_argument("--mu-max", type=float, default=2.0)
    ap.add_argument("--points", type=int, default=12)
    args = ap.parse_args()
    overlaps = [float(x) for x in args.overlaps.split(",")]
    mus = np.geomspace(args.mu_min, args.mu_max, args.points)
    print("mu        " + " ".join(f"cos2={c:<8g}" for c in overlaps))
    for mu in mus:
        print(f"{mu:<9.4g} " + " ".join(f"{optics.hom_visibility_exact(mu, mu, np.arccos(np.sqrt(c))):<13.5f}" for c in overlaps))


if __name__ == "__main__":
    main()
