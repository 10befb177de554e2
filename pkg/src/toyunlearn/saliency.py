"""Fisher-diagonal weight saliency and the forget/preserve gradient mask.

The saliency of a coordinate on a dataset is the mean over samples of its
squared per-sample loss gradient, taken at the pre-unlearning weights. A
coordinate is released for forget-gradient updates when its saliency on the
targeted set is at least ``beta`` times its saliency on the preserved set.
"""
from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import torch

from . import container
from .model import parameter_group
from .numerics import COMPONENTS, ContractError, ParamSet, backward

MASK_EPS = 1e-12


@dataclass
class SaliencyMap:
    scores: "OrderedDict[str, torch.Tensor]"
    components: dict[str, str]
    source_dataset_id: str = ""
    sample_count: int = 0

    def names(self) -> list[str]:
        return list(self.scores)

    def save(self, path) -> str:
        arrays = [(n, s.numpy(), self.components[n]) for n, s in self.scores.items()]
        meta = {"kind": "saliency", "source_dataset_id": self.source_dataset_id, "sample_count": self.sample_count}
        return container.save(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "SaliencyMap":
        meta, arrays = container.load(path)
        scores = OrderedDict((n, torch.from_numpy(a)) for n, (a, _) in arrays.items())
        return cls(scores, {n: t for n, (_, t) in arrays.items()}, meta["source_dataset_id"], meta["sample_count"])


@dataclass
class GradientMask:
    bits: "OrderedDict[str, torch.Tensor]"  # bool tensors
    components: dict[str, str]
    beta: float = 1.0
    component_scope: tuple[str, ...] = COMPONENTS

    def total(self) -> int:
        return int(sum(int(b.sum()) for b in self.bits.values()))

    def numel(self) -> int:
        return sum(b.numel() for b in self.bits.values())

    def check_matches(self, params: ParamSet) -> None:
        if list(self.bits) != params.names():
            raise ContractError("mask does not match model parameters")
        for n in params:
            if self.bits[n].shape != params[n].shape:
                raise ContractError(f"mask shape mismatch for {n}")

    def coordinates(self) -> set[tuple[str, int]]:
        out = set()
        for n, b in self.bits.items():
            out.update((n, int(i)) for i in torch.nonzero(b.reshape(-1)).reshape(-1))
        return out

    @classmethod
    def full(cls, params: ParamSet, value: bool = True) -> "GradientMask":
        bits = OrderedDict((n, torch.full(params[n].shape, value, dtype=torch.bool)) for n in params)
        return cls(bits, {n: params.component(n) for n in params}, 0.0 if value else float("inf"))

    def save(self, path) -> str:
        arrays = [(n, b.numpy(), self.components[n]) for n, b in self.bits.items()]
        return container.save(path, arrays, {"kind": "mask", "beta": self.beta, "scope": list(self.component_scope)})

    @classmethod
    def load(cls, path) -> "GradientMask":
        meta, arrays = container.load(path)
        bits = OrderedDict((n, torch.from_numpy(a.astype(bool))) for n, (a, _) in arrays.items())
        return cls(bits, {n: t for n, (_, t) in arrays.items()}, meta["beta"], tuple(meta["scope"]))


def fisher_diag(
    model: Any,
    dataset: Sequence,
    loss_fn: Callable[[Any, Any], torch.Tensor],
    dataset_id: str = "",
) -> SaliencyMap:
    """Mean over samples of the squared per-sample gradient of ``loss_fn``.

    ``model`` only needs a ``params`` attribute (a ParamSet); it is read,
    never modified. Samples are visited in dataset order and accumulated in
    that order, so the result is bit-reproducible.
    """
    if len(dataset) == 0:
        raise ContractError("fisher_diag: empty dataset")
    params: ParamSet = model.params
    acc = OrderedDict((n, torch.zeros_like(params[n]).detach()) for n in params)
    for sample in dataset:
        g = backward(loss_fn(model, sample), params)
        for n in acc:
            acc[n] += g[n] * g[n]
    scores = OrderedDict((n, a / len(dataset)) for n, a in acc.items())
    return SaliencyMap(scores, {n: params.component(n) for n in params}, dataset_id, len(dataset))


def compute_mask(
    s_target: SaliencyMap,
    s_preserve: SaliencyMap,
    beta: float = 1.0,
    scope: Iterable[str] = COMPONENTS,
) -> GradientMask:
    """bit = [S_T / (S_P + eps) >= beta] inside ``scope``, 0 elsewhere.

    Evaluated as S_T >= beta * S_P where S_P > 0 and as S_T >= beta * eps
    where S_P == 0. Folding eps into a non-zero S_P would turn an exact tie
    S_T == S_P into a 0 bit.
    """
    if beta <= 0:
        raise ContractError("beta must be positive")
    scope = tuple(c for c in COMPONENTS if c in set(scope))
    if s_target.names() != s_preserve.names():
        raise ContractError("saliency maps cover different parameters")
    bits = OrderedDict()
    for n, st in s_target.scores.items():
        sp = s_preserve.scores[n]
        if st.shape != sp.shape:
            raise ContractError(f"saliency shape mismatch for {n}")
        if s_target.components[n] in scope:
            bits[n] = torch.where(sp > 0, st >= beta * sp, st >= beta * MASK_EPS)
        else:
            bits[n] = torch.zeros(st.shape, dtype=torch.bool)
    return GradientMask(bits, dict(s_target.components), beta, scope)


def mask_stats(mask: GradientMask, params: ParamSet) -> list[dict]:
    """Set bits per (layer index, sublayer kind)."""
    mask.check_matches(params)
    groups: dict[tuple[int, str], list[int]] = {}
    for n, b in mask.bits.items():
        g = groups.setdefault(parameter_group(n), [0, 0])
        g[0] += int(b.sum())
        g[1] += b.numel()
    return [
        {"layer_index": layer, "sublayer_kind": kind, "set_bits": s, "total_bits": t}
        for (layer, kind), (s, t) in sorted(groups.items())
    ]


def mask_stats_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["layer_index", "sublayer_kind", "set_bits", "total_bits"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def component_fractions(mask: GradientMask) -> dict[str, float]:
    out = {}
    for comp in COMPONENTS:
        names = [n for n in mask.bits if mask.components[n] == comp]
        total = sum(mask.bits[n].numel() for n in names)
        out[comp] = sum(int(mask.bits[n].sum()) for n in names) / total if total else 0.0
    return out
