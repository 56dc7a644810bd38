#!/usr/bin/env python3
"""Epsilon-delta table for the office pair at two chi-square degrees of freedom.

Prints, for each delta, the printed reference value next to the norm-bound
and S-procedure curves for k = 2 and k = 3 (the noise dimension).
"""
import argparse

import numpy as np

from apsim.cases import load_case_data
from apsim.models import model_from_dict
from apsim.simrel import LtiInterface, LtiPair, reference_deltas, tradeoff_normbound, tradeoff_sprocedure


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--c1", type=float, default=0.04)
    ap.add_argument("--csv", default=None, help="also write the table to this CSV file")
    a = ap.parse_args()
    d = load_case_data("office")
    concrete = model_from_dict(d["concrete"])
    abstract = model_from_dict(d["reduced"]).with_(input_bound=a.c1)
    g = d["interface"]
    iface = LtiInterface(g["R"], g["Q"], g["K"], g["P"])
    M = np.asarray(d["M"], float)
    pair = LtiPair(concrete, abstract)
    deltas = reference_deltas()                       # 1 down to 1e-3
    ref = np.asarray(d["reference_epsilons"], float)
    cols = {"reference": ref}
    for k in (2, 3):
        nb = tradeoff_normbound(pair, iface, M, deltas, a.c1, k)
        sp = tradeoff_sprocedure(pair, iface, M, deltas, a.c1, k)
        cols[f"normbound_k{k}"] = [nb.epsilon_at(x) for x in deltas]
        cols[f"sproc_k{k}"] = [sp.epsilon_at(x) for x in deltas]
    header = ["delta"] + list(cols)
    rows = [[delta] + [cols[c][i] for c in cols] for i, delta in enumerate(deltas)]
    print("  ".join(f"{h:>13}" for h in header))
    for r in rows:
        print("  ".join(f"{v:13.5g}" for v in r))
    if a.csv:
        with open(a.csv, "w") as fh:
            fh.write(",".join(header) + "\n")
            for r in rows:
                fh.write(",".join(repr(float(v)) for v in r) + "\n")


if __name__ == "__main__":
    main()
