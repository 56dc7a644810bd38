#!/usr/bin/env python3
"""Case 2: office model pipeline from reduction to the sandwich report.

Runs the resumable pipeline; pass a JSON file with configuration fields
(for example ``{"noise_dof": 2}`` or ``{"certificate_source": "synthesized"}``)
to change the setting.
"""
import argparse
import sys

from apsim.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="out/case2")
    ap.add_argument("--seed", type=int, default=2017)
    ap.add_argument("--config", default=None)
    ap.add_argument("--no-resume", action="store_true")
    a = ap.parse_args()
    argv = ["--seed", str(a.seed), "--out-dir", a.out_dir, "-v", "pipeline"]
    if a.config:
        argv += ["--config", a.config]
    if a.no_resume:
        argv.append("--no-resume")
    sys.exit(main(argv))
