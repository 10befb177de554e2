"""Unlearning trainers: GA, GA_Diff, KL_Min, NPO and mask-constrained ascent.

Every method is a gradient rule over a forget batch and (for the two-term
methods) a retain batch. Two-term gradients are always formed from separate
backward passes, ``-g_forget + g_retain``, so that the masked method with an
all-ones mask reproduces GA_Diff bit for bit.

The mask multiplies the forget-loss *gradient* coordinate-wise: a mask-0
coordinate receives no contribution from the forget term. The retain
gradient is never masked.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .datagen import Benchmark, QAItem
from .model import ToyMLLM, batch_nll, batch_sequence_logprob, text_logits
from .numerics import COMPONENTS, ContractError, GradSet, Optimizer, backward, log_softmax
from .saliency import GradientMask, SaliencyMap, compute_mask, fisher_diag
from .train import TrainConfig, finetune, shuffled_batches

METHODS = ("GA", "GA_Diff", "KL_Min", "NPO", "MMUnlearner")


@dataclass(frozen=True)
class UnlearnConfig:
    method: str = "MMUnlearner"
    epochs: int = 15
    batch_size: int = 4
    lr: float = 2e-3
    npo_beta: float = 0.4
    mask_beta: float = 1.0
    mask_scope: tuple[str, ...] = COMPONENTS
    seed: int = 0
    optimizer: str = "adam"
    # "preserved": retain term over the preserved set; "retain_vqa": retain VQA only
    retain_source: str = "preserved"
    # "retain": KL anchored on retain VQA; "forget": anchored on the forget batch
    kl_source: str = "retain"
    use_retain: bool = True  # False drops the retain term of the masked method

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1 or self.npo_beta <= 0 or self.mask_beta <= 0:
            raise ContractError("lr, batch_size, npo_beta and mask_beta must be positive and epochs nonnegative")
        if self.retain_source not in ("preserved", "retain_vqa") or self.kl_source not in ("retain", "forget"):
            raise ContractError("bad retain_source / kl_source")


@dataclass(frozen=True)
class ReferenceModel:
    """Frozen weights used as an anchor (KL_Min) or reference policy (NPO)."""

    model: ToyMLLM

    @classmethod
    def snapshot(cls, model: ToyMLLM) -> "ReferenceModel":
        return cls(model.clone())


def _examples(batch: Sequence[QAItem]):
    if len(batch) == 0:
        raise ContractError("empty batch")
    return [it.example() for it in batch]


# ------------------------------------------------------------------ losses


def ga_loss(model: ToyMLLM, forget_batch: Sequence[QAItem]) -> torch.Tensor:
    """Mean forget NLL. Trainers ascend it."""
    return batch_nll(model, _examples(forget_batch))


def ga_diff_loss(model: ToyMLLM, forget_batch, retain_batch) -> torch.Tensor:
    return -batch_nll(model, _examples(forget_batch)) + batch_nll(model, _examples(retain_batch))


def kl_term(model: ToyMLLM, ref: ReferenceModel, batch: Sequence[QAItem]) -> torch.Tensor:
    """Mean over samples of the per-position KL(current || reference).

    Positions are the text positions that predict a following text token.
    """
    examples = _examples(batch)
    cur = text_logits(model, examples)
    with torch.no_grad():
        old = text_logits(ref.model, examples)
    per_sample = []
    for lc, lo in zip(cur, old):
        lp, lq = log_softmax(lc[:-1], dim=-1), log_softmax(lo[:-1], dim=-1)
        per_sample.append((lp.exp() * (lp - lq)).sum(-1).mean())
    return torch.stack(per_sample).mean()


def kl_min_loss(model: ToyMLLM, ref: ReferenceModel, forget_batch, kl_batch) -> torch.Tensor:
    return -batch_nll(model, _examples(forget_batch)) + kl_term(model, ref, kl_batch)


def softplus(x: torch.Tensor) -> torch.Tensor:
    # log(1 + e^x) without overflow
    return torch.clamp(x, min=0) + torch.log1p(torch.exp(-x.abs()))


def npo_loss(model: ToyMLLM, ref: ReferenceModel, forget_batch, beta: float = 0.4) -> torch.Tensor:
    """Batch mean of (2/beta) * log(1 + (pi_theta / pi_ref)^beta), in log space."""
    if beta <= 0:
        raise ContractError("npo beta must be positive")
    examples = _examples(forget_batch)
    logp = batch_sequence_logprob(model, examples)
    with torch.no_grad():
        logp_ref = batch_sequence_logprob(ref.model, examples)
    return (2.0 / beta * softplus(beta * (logp - logp_ref))).mean()


# --------------------------------------------------------------- gradients


def _combine(forget_grad: GradSet, retain_grad: Optional[GradSet], mask: Optional[GradientMask]) -> tuple[GradSet, GradSet]:
    """(-masked forget gradient [+ retain gradient], masked forget gradient)."""
    masked = GradSet()
    for n, g in forget_grad.items():
        masked[n] = g if mask is None else torch.where(mask.bits[n], g, torch.zeros_like(g))
    total = GradSet()
    for n, g in masked.items():
        total[n] = -g if retain_grad is None else -g + retain_grad[n]
    return total, masked


def ga_diff_gradient(model: ToyMLLM, forget_batch, retain_batch) -> tuple[GradSet, dict]:
    lf = ga_loss(model, forget_batch)
    gf = backward(lf, model.params)
    lr_ = batch_nll(model, _examples(retain_batch))
    gr = backward(lr_, model.params)
    total, masked = _combine(gf, gr, None)
    return total, {"forget_loss": float(lf.detach()), "retain_loss": float(lr_.detach()), "masked": masked}


def mmunlearner_gradient(
    model: ToyMLLM, mask: GradientMask, forget_batch, retain_batch: Optional[Sequence[QAItem]]
) -> tuple[GradSet, dict]:
    mask.check_matches(model.params)
    lf = ga_loss(model, forget_batch)
    gf = backward(lf, model.params)
    gr, lr_ = None, None
    if retain_batch is not None:
        lr_ = batch_nll(model, _examples(retain_batch))
        gr = backward(lr_, model.params)
    total, masked = _combine(gf, gr, mask)
    return total, {"forget_loss": float(lf.detach()), "retain_loss": None if lr_ is None else float(lr_.detach()), "masked": masked}


def mmunlearner_step(
    model: ToyMLLM,
    mask: GradientMask,
    forget_batch,
    retain_batch: Optional[Sequence[QAItem]],
    lr: float,
    optimizer: Optional[Optimizer] = None,
) -> ToyMLLM:
    """One update along -(mask * grad forget NLL) + grad retain NLL.

    ``retain_batch=None`` disables the retain term. Plain SGD unless an
    optimizer is supplied.
    """
    grad, _ = mmunlearner_gradient(model, mask, forget_batch, retain_batch)
    opt = optimizer or Optimizer("sgd", lr, model.params)
    return model.with_params(opt.step(model.params, grad))


# ---------------------------------------------------------------- trainer


@dataclass
class UnlearnResult:
    model: ToyMLLM
    log: list[dict]
    mask: Optional[GradientMask] = None
    s_target: Optional[SaliencyMap] = None
    s_preserve: Optional[SaliencyMap] = None


def nll_item_loss(model: ToyMLLM, item: QAItem) -> torch.Tensor:
    return batch_nll(model, [item.example()])


def saliency_mask(
    model: ToyMLLM, bench: Benchmark, beta: float = 1.0, scope=COMPONENTS
) -> tuple[GradientMask, SaliencyMap, SaliencyMap]:
    s_t = fisher_diag(model, bench.targeted, nll_item_loss, "targeted")
    s_p = fisher_diag(model, bench.preserved, nll_item_loss, "preserved")
    return compute_mask(s_t, s_p, beta, scope), s_t, s_p


def npo_reference(vanilla: ToyMLLM, bench: Benchmark, cfg: UnlearnConfig) -> ReferenceModel:
    """Copy of the vanilla model further fine-tuned on the retain VQA set."""
    tc = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, optimizer=cfg.optimizer)
    ref, _ = finetune(vanilla.clone(), bench.retain_vqa, tc, seed=cfg.seed + 7)
    return ReferenceModel(ref)


class _Cycler:
    """Endless reshuffled pass over a dataset, one batch at a time."""

    def __init__(self, items: Sequence[QAItem], batch_size: int, rng: np.random.Generator):
        self.items, self.batch_size, self.rng = list(items), batch_size, rng
        self.queue: list[np.ndarray] = []

    def next(self) -> list[QAItem]:
        if not self.queue:
            self.queue = shuffled_batches(len(self.items), self.batch_size, self.rng)
        return [self.items[i] for i in self.queue.pop(0)]


def run_unlearning(
    vanilla: ToyMLLM,
    bench: Benchmark,
    cfg: UnlearnConfig,
    mask: Optional[GradientMask] = None,
    reference: Optional[ReferenceModel] = None,
) -> UnlearnResult:
    """Apply one unlearning method; the vanilla model is left untouched.

    Each step pairs one forget batch with one retain batch (two-term
    methods). An epoch is one pass over the targeted set.
    """
    forget = bench.targeted
    result = UnlearnResult(vanilla.clone(), [])
    if cfg.epochs == 0 or not forget:
        return result

    rng = np.random.default_rng([cfg.seed, 3])
    method = cfg.method
    retain_items = bench.preserved if (method == "MMUnlearner" and cfg.retain_source == "preserved") else bench.retain_vqa
    retain = _Cycler(retain_items, cfg.batch_size, np.random.default_rng([cfg.seed, 4])) if retain_items else None

    if method == "MMUnlearner" and mask is None:
        mask, result.s_target, result.s_preserve = saliency_mask(vanilla, bench, cfg.mask_beta, cfg.mask_scope)
    result.mask = mask
    if method == "KL_Min" and reference is None:
        reference = ReferenceModel.snapshot(vanilla)
    if method == "NPO" and reference is None:
        reference = npo_reference(vanilla, bench, cfg)

    model = result.model
    opt = Optimizer(cfg.optimizer, cfg.lr, model.params)
    step = 0
    for _ in range(cfg.epochs):
        for idx in shuffled_batches(len(forget), cfg.batch_size, rng):
            fb = [forget[i] for i in idx]
            retain_loss = None
            if method == "GA":
                lf = ga_loss(model, fb)
                grad, masked = _combine(backward(lf, model.params), None, None)
                forget_loss, total_loss = float(lf.detach()), -float(lf.detach())
            elif method == "GA_Diff":
                grad, info = ga_diff_gradient(model, fb, retain.next())
                masked, forget_loss, retain_loss = info["masked"], info["forget_loss"], info["retain_loss"]
                total_loss = -forget_loss + retain_loss
            elif method == "KL_Min":
                kb = fb if cfg.kl_source == "forget" else retain.next()
                lf = ga_loss(model, fb)
                kl = kl_term(model, reference, kb)
                grad, masked = _combine(backward(lf, model.params), backward(kl, model.params), None)
                forget_loss, retain_loss = float(lf.detach()), float(kl.detach())
                total_loss = -forget_loss + retain_loss
            elif method == "NPO":
                loss = npo_loss(model, reference, fb, cfg.npo_beta)
                grad = backward(loss, model.params)
                masked = grad
                forget_loss = total_loss = float(loss.detach())
            else:
                rb = retain.next() if (cfg.use_retain and retain is not None) else None
                grad, info = mmunlearner_gradient(model, mask, fb, rb)
                masked, forget_loss, retain_loss = info["masked"], info["forget_loss"], info["retain_loss"]
                total_loss = -forget_loss + (retain_loss or 0.0)
            model = model.with_params(opt.step(model.params, grad))
            result.log.append(
                {
                    "step": step,
                    "method": method,
                    "forget_loss": forget_loss,
                    "retain_loss": retain_loss,
                    "total_loss": total_loss,
                    "grad_norm_masked": masked.norm(),
                    "grad_norm_total": grad.norm(),
                }
            )
            step += 1
    result.model = model
    return result


LOG_FIELDS = ["step", "method", "forget_loss", "retain_loss", "total_loss", "grad_norm_masked", "grad_norm_total"]


def log_csv(log: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in log:
        w.writerow({k: ("" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k])) for k in LOG_FIELDS})
    return buf.getvalue()
