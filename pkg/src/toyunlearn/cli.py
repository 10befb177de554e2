"""Command line entry point: ``toyunlearn {finetune,saliency,unlearn,eval,sweep}``.

On failure the process exits with status 1 and prints exactly one line to
stderr, ``error: <ErrorClass>: <message>``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import DEFAULT_RATIOS, RunConfig, load_config
from .unlearn import METHODS


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _names(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--method", choices=METHODS, help="unlearning method (overrides config)")
    common.add_argument("--ratio", type=float, help="forget ratio (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="toyunlearn", description="Toy multimodal unlearning pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("finetune", parents=[common], help="train the vanilla model")
    sub.add_parser("saliency", parents=[common], help="saliency maps and gradient mask")
    sub.add_parser("unlearn", parents=[common], help="run one unlearning method")
    ev = sub.add_parser("eval", parents=[common], help="six-dimension evaluation")
    ev.add_argument("checkpoints", nargs="*", type=Path, help="defaults to vanilla + the configured method")
    ev.add_argument("--no-rouge", action="store_true", help="skip generation metrics")
    sw = sub.add_parser("sweep", parents=[common], help="methods x forget ratios")
    sw.add_argument("--methods", type=_names, default=list(METHODS))
    sw.add_argument("--ratios", type=_floats, default=list(DEFAULT_RATIOS))
    sw.add_argument("--no-rouge", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if args.method is not None:
        cfg = replace(cfg, unlearn=replace(cfg.unlearn, method=args.method))
    if args.ratio is not None:
        cfg = replace(cfg, data=replace(cfg.data, forget_ratio=args.ratio))
    return cfg


def run(args) -> None:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    if args.command == "finetune":
        print(pipeline.stage_finetune(cfg, out))
    elif args.command == "saliency":
        print(pipeline.stage_saliency(cfg, out))
    elif args.command == "unlearn":
        print(pipeline.stage_unlearn(cfg, out))
    elif args.command == "eval":
        reports = pipeline.stage_eval(cfg, out, args.checkpoints or None, rouge=not args.no_rouge)
        for name, rep in reports.items():
            print(f"== {name}")
            print(rep.summary())
    elif args.command == "sweep":
        print(pipeline.sweep(cfg, args.methods, args.ratios, out, rouge=not args.no_rouge))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except Exception as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
