"""Multiple-choice accuracy, ROUGE-L, six-dimension reports, deviation heatmaps."""
from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .datagen import DatasetSplit, QAItem, partition
from .model import ToyMLLM, answer_logprobs, generate_greedy, parameter_group
from .numerics import ContractError, ParamSet

DIMENSION_LABELS = OrderedDict(
    [
        (("forget", "visual"), "Forget VQA"),
        (("forget", "textual"), "Forget QA"),
        (("retain", "visual"), "Retain VQA"),
        (("retain", "textual"), "Retain QA"),
        # stand-ins for the real-world sets; not benchmark parity
        (("general", "visual"), "General VQA"),
        (("general", "textual"), "General QA"),
    ]
)


def dim_key(dim: tuple[str, str]) -> str:
    return f"{dim[0]}_{dim[1]}"


# --------------------------------------------------------------- choices


@torch.no_grad()
def choice_scores(model: ToyMLLM, items: Sequence[QAItem]) -> list[np.ndarray]:
    """Length-normalised log-probability of every choice of every item."""
    examples, owners = [], []
    for i, it in enumerate(items):
        for c in range(len(it.choices)):
            examples.append(it.example(c))
            owners.append(i)
    lps = answer_logprobs(model, examples) if examples else []
    out = [[] for _ in items]
    for i, lp in zip(owners, lps):
        out[i].append(float(lp.mean()))
    return [np.array(s) for s in out]


def score_choice(model: ToyMLLM, item: QAItem, choice_index: int) -> float:
    return float(choice_scores(model, [item])[0][choice_index])


def predict(scores: np.ndarray) -> int:
    # np.argmax returns the first maximum: ties go to the lowest index
    return int(np.argmax(scores))


def mc_accuracy(model: ToyMLLM, items: Sequence[QAItem]) -> float:
    if not items:
        raise ContractError("mc_accuracy: no items")
    scores = choice_scores(model, items)
    return float(np.mean([predict(s) == it.correct_index for s, it in zip(scores, items)]))


# ---------------------------------------------------------------- rouge


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(prediction: Sequence, reference: Sequence) -> float:
    """F1 of LCS recall (vs reference length) and precision (vs prediction length)."""
    if len(reference) == 0:
        raise ContractError("rouge_l: empty reference")
    if len(prediction) == 0:
        return 0.0
    lcs = lcs_length(prediction, reference)
    if lcs == 0:
        return 0.0
    recall, precision = lcs / len(reference), lcs / len(prediction)
    return 2 * recall * precision / (recall + precision)


def generation_rouge(model: ToyMLLM, items: Sequence[QAItem], eos_id: Optional[int] = None) -> float:
    scores = []
    for it in items:
        out = generate_greedy(model, it.image, it.question, len(it.answer), eos_id)
        scores.append(rouge_l(out.answer, it.answer))
    return float(np.mean(scores))


# --------------------------------------------------------------- reports


@dataclass
class EvalReport:
    accuracy: dict[str, float] = field(default_factory=dict)
    rouge_l: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        rows = []
        for dim, label in DIMENSION_LABELS.items():
            k = dim_key(dim)
            if k not in self.accuracy:
                continue
            rows.append(
                {
                    "dimension": k,
                    "label": label,
                    "n_items": self.counts[k],
                    "accuracy": f"{self.accuracy[k]:.6f}",
                    "rouge_l": f"{self.rouge_l[k]:.6f}" if k in self.rouge_l else "",
                }
            )
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["dimension", "label", "n_items", "accuracy", "rouge_l"], lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()

    def summary(self, title: str = "") -> str:
        cols = [(dim_key(d), lab) for d, lab in DIMENSION_LABELS.items()]
        head = " | ".join(f"{lab:>11}" for _, lab in cols)
        acc = " | ".join(f"{100 * self.accuracy[k]:10.1f}%" if k in self.accuracy else f"{'n/a':>11}" for k, _ in cols)
        rl = " | ".join(f"{self.rouge_l[k]:11.3f}" if k in self.rouge_l else f"{'':>11}" for k, _ in cols)
        lines = [title] if title else []
        lines += [f"{'':8}   {head}", f"{'Acc':8} | {acc}"]
        if self.rouge_l:
            lines.append(f"{'ROUGE-L':8} | {rl}")
        return "\n".join(lines) + "\n"


def evaluate_all(
    model: ToyMLLM,
    split: DatasetSplit,
    items: Sequence[QAItem],
    eos_id: Optional[int] = None,
    with_rouge: bool = True,
) -> EvalReport:
    """Accuracy on all six dimensions; ROUGE-L on the textual ones.

    Dimensions with no items are left out of the report rather than scored 0.
    """
    report = EvalReport()
    for dim, group in partition(items, split).items():
        if not group:
            continue
        k = dim_key(dim)
        report.counts[k] = len(group)
        report.accuracy[k] = mc_accuracy(model, group)
        if with_rouge and dim[1] == "textual":
            report.rouge_l[k] = generation_rouge(model, group, eos_id)
    return report


def report_deltas(before: EvalReport, after: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dimension", "before", "after", "delta"])
    for k, v in after.accuracy.items():
        if k in before.accuracy:
            w.writerow([k, f"{before.accuracy[k]:.6f}", f"{v:.6f}", f"{v - before.accuracy[k]:.6f}"])
    return buf.getvalue()


# --------------------------------------------------------------- heatmap


@dataclass(frozen=True)
class DeviationRecord:
    parameter: str
    layer_index: int
    sublayer_kind: str
    count: int


def _flat_deviation(before: ParamSet, after: ParamSet) -> tuple[list[str], list[int], np.ndarray]:
    if sorted(before.names()) != sorted(after.names()):
        raise ContractError("deviation: parameter names differ")
    names = sorted(before.names())
    sizes, chunks = [], []
    for n in names:
        a, b = before[n].detach().numpy(), after[n].detach().numpy()
        if a.shape != b.shape:
            raise ContractError(f"deviation: shape mismatch for {n}")
        chunks.append(np.abs(b - a).reshape(-1))
        sizes.append(a.size)
    return names, sizes, np.concatenate(chunks)


def top_deviated(before: ParamSet, after: ParamSet, n: int) -> list[tuple[str, int]]:
    """The n coordinates with the largest |after - before|.

    Ties are broken by parameter name, then flat coordinate index.
    """
    names, sizes, dev = _flat_deviation(before, after)
    if not 0 <= n <= dev.size:
        raise ContractError("deviation: n out of range")
    order = np.argsort(-dev, kind="stable")[:n]
    starts = np.cumsum([0] + sizes)
    which = np.searchsorted(starts, order, side="right") - 1
    return [(names[w], int(i - starts[w])) for w, i in zip(which, order)]


def deviation_heatmap(before: ParamSet, after: ParamSet, n: int) -> list[DeviationRecord]:
    counts: dict[str, int] = {}
    for name, _ in top_deviated(before, after, n):
        counts[name] = counts.get(name, 0) + 1
    return [DeviationRecord(nm, *parameter_group(nm), counts.get(nm, 0)) for nm in sorted(before.names())]


def group_counts(records: Sequence[DeviationRecord]) -> "OrderedDict[tuple[int, str], int]":
    out: dict[tuple[int, str], int] = {}
    for r in records:
        key = (r.layer_index, r.sublayer_kind)
        out[key] = out.get(key, 0) + r.count
    return OrderedDict(sorted(out.items()))


def heatmap_csv(records: Sequence[DeviationRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_index", "sublayer_kind", "count"])
    for (layer, kind), c in group_counts(records).items():
        w.writerow([layer, kind, c])
    return buf.getvalue()


def write_report(report: EvalReport, stem, title: str = "") -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".csv").write_text(report.to_csv())
    stem.with_suffix(".txt").write_text(report.summary(title))
