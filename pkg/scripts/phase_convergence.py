#!/usr/bin/env python3
"""How the Erlang-phase capacity converges as the phase count doubles.

For a single-state chain the exact value is known, so both the raw
sequence and its first-order extrapolation can be scored directly.  The
two-state platoon chain shows the same pattern without a reference.
"""

import argparse
import warnings

from gapcap import mmpp as mm
from gapcap import poisson_core as pc
from gapcap.validation import HIGH_LOW, platoon_mmpp

H = 3600.0


def table(b, m, exact, k_max):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", mm.CapacityWarning)
        res = mm.capacity_mmpp(b, m, HIGH_LOW, k0=8, tol=0.0, k_max=k_max)
    print(f"\n{b}  {'k':>5} {'raw veh/h':>12} {'extrap veh/h':>13} {'raw err':>9} {'ext err':>9}")
    for k, raw, ext, _ in res.history:
        r_err = f"{abs(raw - exact) / exact:9.2e}" if exact else " " * 9
        e_err = f"{abs(ext - exact) / exact:9.2e}" if (exact and ext is not None) else " " * 9
        e_val = f"{ext * H:13.5f}" if ext is not None else " " * 13
        print(f"    {k:>5} {raw * H:12.5f} {e_val} {r_err} {e_err}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--q-veh-h", type=float, default=600.0)
    ap.add_argument("--k-max", type=int, default=2048)
    args = ap.parse_args()
    q = args.q_veh_h / H
    print(f"single state, q = {args.q_veh_h:g} veh/h")
    for b in ("B1", "B2", "B3"):
        table(b, mm.MmppSpec.poisson(q), pc.capacity(b, HIGH_LOW, q), args.k_max)
    print("\nplatoon chain (no closed form)")
    for b in ("B1", "B2", "B3"):
        table(b, platoon_mmpp(), None, args.k_max)


if __name__ == "__main__":
    main()
