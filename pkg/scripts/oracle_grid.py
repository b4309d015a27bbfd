#!/usr/bin/env python3
"""Simulated vs analytic capacity on the behavior x arrivals x impatience grid.

Prints one row per cell with the exact value, the 99% interval and whether
it brackets.  MMPP cells with impatience have no analytic value.
"""

import argparse
import time

from gapcap.validation import check_oracle


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--crossings", type=int, default=1_000_000, help="per cell, split over replications")
    ap.add_argument("--replications", type=int, default=10)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    t0 = time.perf_counter()
    res = check_oracle(crossings=args.crossings, replications=args.replications, seed=args.seed)
    for label, outcome in res.data["rows"]:
        print(f"{label:<32} {outcome}")
    print(res.line())
    print(f"total {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
