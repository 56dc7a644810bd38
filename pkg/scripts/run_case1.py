#!/usr/bin/env python3
"""Case 1: trade-off curve and excursion statistics of the refined closed loop.

Writes the same artifacts as ``apsim demo case1`` into ``--out-dir``.
"""
import argparse
import sys

from apsim.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="out")
    ap.add_argument("--seed", type=int, default=2017)
    ap.add_argument("--trials", type=int, default=1000)
    a = ap.parse_args()
    sys.exit(main(["--seed", str(a.seed), "--out-dir", a.out_dir, "demo", "case1", "--trials", str(a.trials)]))
