#!/usr/bin/env python3
"""Every method at forget ratios 5/10/15%, plus a per-ratio summary table.

    python3 scripts/run_sweep.py --out runs/sweep [--seeds 0,1,2] [--no-rouge]

With several seeds each seed gets its own subdirectory; ``sweep_all.csv``
stacks them with a leading seed column.
"""
import argparse
import csv
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np

from toyunlearn import pipeline
from toyunlearn.config import DEFAULT_RATIOS, RunConfig, load_config
from toyunlearn.unlearn import METHODS


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--ratios", default=",".join(str(r) for r in DEFAULT_RATIOS))
    ap.add_argument("--methods", default=",".join(METHODS))
    ap.add_argument("--no-rouge", action="store_true")
    args = ap.parse_args()

    base = load_config(args.config) if args.config else RunConfig()
    ratios = [float(r) for r in args.ratios.split(",")]
    methods = args.methods.split(",")
    out = Path(args.out)
    stacked = []
    for seed in (int(s) for s in args.seeds.split(",")):
        path = pipeline.sweep(replace(base, seed=seed), methods, ratios, out / f"seed{seed}", rouge=not args.no_rouge)
        with open(path) as fh:
            stacked += [[seed, *row] for row in list(csv.reader(fh))[1:]]
    with open(out / "sweep_all.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "method", "ratio", "dimension", "value"])
        w.writerows(stacked)

    cells = defaultdict(list)
    for seed, method, ratio, dim, value in stacked:
        cells[(method, ratio, dim)].append(float(value))
    dims = ["forget_visual_acc", "forget_textual_acc", "retain_visual_acc", "retain_textual_acc"]
    print(f"{'method':12} {'ratio':>5} " + " ".join(f"{d:>19}" for d in dims))
    for method in ["Vanilla", *methods]:
        for r in ratios:
            vals = [cells.get((method, f"{r:.2f}", d), []) for d in dims]
            print(f"{method:12} {r:5.2f} " + " ".join(f"{np.mean(v):19.3f}" if v else f"{'-':>19}" for v in vals))
    return 0


if __name__ == "__main__":
    sys.exit(main())
