#!/usr/bin/env python3
"""Run the full pipeline and print the comparison table.

    python3 scripts/run_pipeline.py --out runs/demo [--config configs/small.json] [--seed 7]
"""

import argparse
import csv
import sys
import time
from pathlib import Path

from dxarisk import cli


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/demo")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    args = p.parse_args()

    argv = ["pipeline", "--out", args.out]
    if args.config:
        argv += ["--config", args.config]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    start = time.perf_counter()
    status = cli.main(argv)
    print(f"exit {status} after {time.perf_counter() - start:.0f} s", file=sys.stderr)
    table = Path(args.out) / "evaluate" / "comparison.csv"
    if status == cli.EXIT_OK and table.exists():
        with open(table, newline="") as fh:
            rows = list(csv.reader(fh))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        for r in rows:
            print("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return status


if __name__ == "__main__":
    sys.exit(main())
