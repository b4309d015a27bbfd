#!/usr/bin/env python3
"""z-scores of simulated against exact capacity over many seeds.

An unbiased simulator gives z-scores with mean near 0 and spread near 1.
"""

import argparse

import numpy as np

from gapcap import poisson_core as pc
from gapcap.simulator import SimConfig, simulate_capacity
from gapcap.validation import HIGH_LOW

H = 3600.0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=12)
    ap.add_argument("--crossings", type=int, default=100_000)
    ap.add_argument("--q-veh-h", type=float, default=600.0)
    args = ap.parse_args()
    q = args.q_veh_h / H
    for b in ("B1", "B2", "B3"):
        exact = pc.capacity(b, HIGH_LOW, q)
        z = []
        for seed in range(args.seeds):
            est = simulate_capacity(SimConfig(q, b, HIGH_LOW, horizon=args.crossings // 10, seed=seed))
            z.append((est.value - exact) / est.stderr)
        z = np.array(z)
        print(f"{b}: exact {exact * H:.3f} veh/h, z mean {z.mean():+.2f}, sd {z.std(ddof=1):.2f}, max |z| {np.abs(z).max():.2f}")


if __name__ == "__main__":
    main()
