#!/usr/bin/env python3
"""Run every built-in preset and write one CSV per preset.

    python scripts/run_presets.py --outdir results [--quick] [--workers 4]
"""

import argparse
import sys
import time
from pathlib import Path

from gapcap import cli

PRESETS = ("example1", "example2", "example3", "example4", "example5")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--outdir", default="results")
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)

    status = 0
    jobs = [(p, False) for p in PRESETS] + [("example5", True)]
    for name, naive in jobs:
        target = out / f"{name}{'-naive' if naive else ''}.csv"
        argv = ["preset", name, "--out", str(target), "--workers", str(args.workers)]
        if args.quick:
            argv.append("--quick")
        if naive:
            argv.append("--naive")
        t0 = time.perf_counter()
        code = cli.main(argv)
        print(f"{target}: exit {code} ({time.perf_counter() - t0:.1f} s)", file=sys.stderr)
        status |= code
    return status


if __name__ == "__main__":
    sys.exit(main())
