"""Supervised fine-tuning of the toy model (the "vanilla" stage)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datagen import QAItem
from .model import ToyMLLM, batch_nll
from .numerics import ContractError, Optimizer, backward


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 3e-3
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ContractError("epochs must be nonnegative, batch_size and lr positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of index batches; the short tail batch is kept."""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def finetune(
    model: ToyMLLM,
    items: Sequence[QAItem],
    cfg: TrainConfig,
    seed: int,
) -> tuple[ToyMLLM, list[dict]]:
    """Minimise mean answer NLL over ``items``. Returns the new model and a step log."""
    rng = np.random.default_rng(seed)
    params = model.params
    opt = Optimizer(cfg.optimizer, cfg.lr, params)
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in shuffled_batches(len(items), cfg.batch_size, rng):
            m = model.with_params(params)
            loss = batch_nll(m, [items[i].example() for i in idx])
            params = opt.step(params, backward(loss, params))
            log.append({"step": step, "epoch": epoch, "loss": float(loss.detach())})
            step += 1
    return model.with_params(params), log
