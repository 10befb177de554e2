"""Pipeline stages: finetune -> saliency -> unlearn -> eval, plus the ratio sweep.

Each stage writes a ``<stage>.manifest.json`` next to its outputs holding a
hash of its inputs and the sha256 of every output. A stage whose inputs are
unchanged and whose outputs are intact returns without recomputing.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

from . import container
from .config import DEFAULT_RATIOS, RunConfig
from .datagen import Benchmark, export_items
from .evaluate import (
    EvalReport,
    deviation_heatmap,
    evaluate_all,
    heatmap_csv,
    report_deltas,
    write_report,
)
from .model import ToyMLLM, init_model, load_model, save_model
from .saliency import GradientMask, mask_stats, mask_stats_csv
from .train import finetune
from .unlearn import METHODS, log_csv, run_unlearning, saliency_mask

log = logging.getLogger(__name__)

LEARNABILITY_THRESHOLD = 0.9


class PipelineError(RuntimeError):
    """Base class; the class name is the machine-readable error code."""


class LearnabilityError(PipelineError):
    pass


class MissingArtifact(PipelineError):
    pass


# ---------------------------------------------------------------- helpers


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _inputs_hash(**parts) -> str:
    return _sha(json.dumps(parts, sort_keys=True, default=str))


def _fresh(out: Path, stage: str, inputs: str) -> bool:
    mf = out / f"{stage}.manifest.json"
    if not mf.exists():
        return False
    data = json.loads(mf.read_text())
    if data.get("inputs") != inputs:
        return False
    for rel, digest in data.get("outputs", {}).items():
        p = out / rel
        if not p.exists() or container.file_sha256(p) != digest:
            return False
    return True


def _record(out: Path, stage: str, inputs: str, outputs: Sequence[Path]) -> None:
    files = {str(p.relative_to(out)): container.file_sha256(p) for p in outputs}
    (out / f"{stage}.manifest.json").write_text(json.dumps({"inputs": inputs, "outputs": files}, indent=1, sort_keys=True) + "\n")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}")
    return path


def _write_csv_rows(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def build_benchmark(cfg: RunConfig) -> Benchmark:
    return Benchmark.build(cfg.resolved().data)


def vanilla_path(out) -> Path:
    return Path(out) / "vanilla.ckpt"


def unlearned_path(out, method: str) -> Path:
    return Path(out) / f"unlearned_{method}.ckpt"


# ----------------------------------------------------------------- stages


def stage_finetune(cfg: RunConfig, out=None) -> Path:
    """Train the vanilla model on every item and gate on learnability."""
    cfg = cfg.resolved()
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = vanilla_path(out)
    data_no_ratio = {k: v for k, v in asdict(cfg.data).items() if k != "forget_ratio"}
    inputs = _inputs_hash(model=asdict(cfg.model), data=data_no_ratio, vanilla=asdict(cfg.vanilla), seed=cfg.seed)
    if _fresh(out, "finetune", inputs):
        log.info("finetune: up to date")
        return ckpt

    bench = Benchmark.build(cfg.data)
    export_items(bench.items, out / "data" / "items.jsonl", out / "data" / "images.bin")
    model = init_model(cfg.model, cfg.init_seed)
    model, train_log = finetune(model, bench.items, cfg.vanilla, cfg.order_seed)
    save_model(model, ckpt, {"stage": "vanilla"})
    _write_csv_rows(
        out / "finetune_log.csv",
        ["step", "epoch", "loss"],
        [[r["step"], r["epoch"], repr(r["loss"])] for r in train_log],
    )
    report = evaluate_all(model, bench.split, bench.items, bench.vocab.eos, with_rouge=False)
    failing = {k: v for k, v in report.accuracy.items() if v < LEARNABILITY_THRESHOLD}
    outputs = [ckpt, out / "finetune_log.csv", out / "data" / "items.jsonl", out / "data" / "images.bin"]
    if failing:
        raise LearnabilityError(
            "vanilla model below %.0f%% on: %s"
            % (100 * LEARNABILITY_THRESHOLD, ", ".join(f"{k}={v:.3f}" for k, v in sorted(failing.items())))
        )
    _record(out, "finetune", inputs, outputs)
    return ckpt


def stage_saliency(cfg: RunConfig, out=None, vanilla: Optional[Path] = None) -> Path:
    """Targeted/preserved saliency maps, the mask, and per-group mask counts."""
    cfg = cfg.resolved()
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    vpath = _require(Path(vanilla) if vanilla else vanilla_path(out), "vanilla checkpoint")
    inputs = _inputs_hash(
        vanilla=container.file_sha256(vpath),
        data=asdict(cfg.data),
        beta=cfg.unlearn.mask_beta,
        scope=list(cfg.unlearn.mask_scope),
    )
    mask_path = out / "mask.bin"
    if _fresh(out, "saliency", inputs):
        log.info("saliency: up to date")
        return mask_path
    bench = Benchmark.build(cfg.data)
    model = load_model(vpath)
    mask, s_t, s_p = saliency_mask(model, bench, cfg.unlearn.mask_beta, cfg.unlearn.mask_scope)
    s_t.save(out / "saliency_targeted.bin")
    s_p.save(out / "saliency_preserved.bin")
    mask.save(mask_path)
    (out / "mask_stats.csv").write_text(mask_stats_csv(mask_stats(mask, model.params)))
    outputs = [out / "saliency_targeted.bin", out / "saliency_preserved.bin", mask_path, out / "mask_stats.csv"]
    _record(out, "saliency", inputs, outputs)
    return mask_path


def stage_unlearn(cfg: RunConfig, out=None, vanilla: Optional[Path] = None) -> Path:
    cfg = cfg.resolved()
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    method = cfg.unlearn.method
    vpath = _require(Path(vanilla) if vanilla else vanilla_path(out), "vanilla checkpoint")
    mask_file = out / "mask.bin"
    if method == "MMUnlearner" and not mask_file.exists():
        stage_saliency(cfg, out, vpath)
    parts = dict(vanilla=container.file_sha256(vpath), data=asdict(cfg.data), unlearn=asdict(cfg.unlearn))
    if method == "MMUnlearner":
        parts["mask"] = container.file_sha256(mask_file)
    inputs = _inputs_hash(**parts)
    stage = f"unlearn_{method}"
    ckpt = unlearned_path(out, method)
    if _fresh(out, stage, inputs):
        log.info("%s: up to date", stage)
        return ckpt
    bench = Benchmark.build(cfg.data)
    vanilla_model = load_model(vpath)
    mask = GradientMask.load(mask_file) if method == "MMUnlearner" else None
    result = run_unlearning(vanilla_model, bench, cfg.unlearn, mask=mask)
    save_model(result.model, ckpt, {"stage": "unlearned", "method": method, "forget_ratio": cfg.data.forget_ratio})
    logfile = out / f"unlearn_{method}_log.csv"
    logfile.write_text(log_csv(result.log))
    _record(out, stage, inputs, [ckpt, logfile])
    return ckpt


def _report_name(path: Path) -> str:
    return path.stem


def stage_eval(cfg: RunConfig, out=None, checkpoints: Optional[Sequence[Path]] = None, rouge: bool = True) -> dict[str, EvalReport]:
    """Six-dimension reports per checkpoint; deltas and heatmaps against vanilla."""
    cfg = cfg.resolved()
    out = Path(out or cfg.out)
    if not checkpoints:
        checkpoints = [vanilla_path(out), unlearned_path(out, cfg.unlearn.method)]
    checkpoints = [_require(Path(p), "checkpoint") for p in checkpoints]
    bench = Benchmark.build(cfg.data)
    reports: dict[str, EvalReport] = {}
    models: dict[str, ToyMLLM] = {}
    for p in checkpoints:
        name = _report_name(p)
        models[name] = load_model(p)
        reports[name] = evaluate_all(models[name], bench.split, bench.items, bench.vocab.eos, with_rouge=rouge)
        write_report(reports[name], out / f"eval_{name}", title=f"{name} (forget ratio {cfg.data.forget_ratio:.2f})")
    base = next((n for n in models if n == "vanilla"), None)
    if base is not None:
        n_top = None
        for name, m in models.items():
            if name == base:
                continue
            (out / f"deltas_{name}.csv").write_text(report_deltas(reports[base], reports[name]))
            if n_top is None:
                mask_file = out / "mask.bin"
                if mask_file.exists():
                    n_top = GradientMask.load(mask_file).total()
                else:
                    n_top = saliency_mask(models[base], bench, cfg.unlearn.mask_beta, cfg.unlearn.mask_scope)[0].total()
            records = deviation_heatmap(models[base].params, m.params, n_top)
            (out / f"heatmap_{name}.csv").write_text(heatmap_csv(records))
    return reports


def run_all(cfg: RunConfig, out=None) -> dict[str, EvalReport]:
    out = Path(out or cfg.out)
    stage_finetune(cfg, out)
    if cfg.unlearn.method == "MMUnlearner":
        stage_saliency(cfg, out)
    stage_unlearn(cfg, out)
    return stage_eval(cfg, out)


# ------------------------------------------------------------------ sweep


def _report_rows(method: str, ratio: float, report: EvalReport) -> list[list]:
    rows = []
    for k, v in report.accuracy.items():
        rows.append([method, f"{ratio:.2f}", f"{k}_acc", f"{v:.6f}"])
    for k, v in report.rouge_l.items():
        rows.append([method, f"{ratio:.2f}", f"{k}_rouge_l", f"{v:.6f}"])
    return rows


def sweep(
    cfg: RunConfig,
    methods: Sequence[str] = METHODS,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    out=None,
    rouge: bool = True,
) -> Path:
    """Full pipeline per (method, ratio) cell; long-format CSV of every metric.

    A failing cell is logged to ``sweep_failures.csv`` and the sweep goes on.
    """
    out = Path(out or cfg.out)
    vpath = stage_finetune(cfg, out)
    rows: list[list] = []
    failures: list[list] = []
    for ratio in ratios:
        rcfg = replace(cfg, data=replace(cfg.data, forget_ratio=float(ratio)))
        sub = out / f"ratio_{ratio:.2f}"
        sub.mkdir(parents=True, exist_ok=True)
        bench = build_benchmark(rcfg)
        vreport = evaluate_all(load_model(vpath), bench.split, bench.items, bench.vocab.eos, with_rouge=rouge)
        rows += _report_rows("Vanilla", ratio, vreport)
        for method in methods:
            mcfg = replace(rcfg, unlearn=replace(rcfg.unlearn, method=method))
            try:
                if method == "MMUnlearner":
                    stage_saliency(mcfg, sub, vpath)
                ckpt = stage_unlearn(mcfg, sub, vpath)
                report = evaluate_all(load_model(ckpt), bench.split, bench.items, bench.vocab.eos, with_rouge=rouge)
                write_report(report, sub / f"eval_{method}", title=f"{method} (forget ratio {ratio:.2f})")
                rows += _report_rows(method, ratio, report)
            except Exception as exc:  # recorded, sweep continues
                log.warning("sweep cell %s @ %.2f failed: %s", method, ratio, exc)
                failures.append([method, f"{ratio:.2f}", type(exc).__name__, str(exc).replace("\n", " ")])
    result = out / "sweep.csv"
    _write_csv_rows(result, ["method", "ratio", "dimension", "value"], rows)
    _write_csv_rows(out / "sweep_failures.csv", ["method", "ratio", "error", "message"], failures)
    return result


def read_sweep(path) -> dict[tuple[str, float, str], float]:
    out = {}
    with open(path) as fh:
        for r in csv.DictReader(fh):
            out[(r["method"], float(r["ratio"]), r["dimension"])] = float(r["value"])
    return out
