#!/usr/bin/env python3
"""Fine-tune the vanilla model, then run and score every unlearning method.

    python3 scripts/run_pipeline.py --out runs/main [--config my.cfg] [--seed 0]

Writes the usual stage artifacts under --out plus ``comparison.csv`` with one
row per (model, dimension).
"""
import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from toyunlearn import pipeline
from toyunlearn.config import RunConfig, load_config
from toyunlearn.unlearn import METHODS


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", default="runs/main")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--methods", default=",".join(METHODS))
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out)
    pipeline.stage_finetune(cfg, out)
    pipeline.stage_saliency(cfg, out)
    ckpts = [pipeline.vanilla_path(out)]
    for method in args.methods.split(","):
        ckpts.append(pipeline.stage_unlearn(replace(cfg, unlearn=replace(cfg.unlearn, method=method)), out))
    reports = pipeline.stage_eval(cfg, out, ckpts)

    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "dimension", "accuracy", "rouge_l"])
        for name, rep in reports.items():
            for dim, acc in rep.accuracy.items():
                rl = rep.rouge_l.get(dim)
                w.writerow([name, dim, f"{acc:.6f}", "" if rl is None else f"{rl:.6f}"])
    for name, rep in reports.items():
        print(rep.summary(name))
    return 0


if __name__ == "__main__":
    sys.exit(main())
