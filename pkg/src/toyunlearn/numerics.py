"""Tensor primitives, parameter containers, gradients and optimizers.

All arithmetic is float64 on CPU. Reverse-mode differentiation is delegated
to ``torch.autograd``; this module wraps it behind ``ParamSet``/``GradSet`` so
the rest of the package never touches ``.grad`` attributes directly.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
COMPONENTS = ("vision_encoder", "connector", "language_model")

torch.set_num_threads(1)


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise ContractError(f"{what}: non-finite input")


def as_tensor(data, shape=None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE)
    if shape is not None:
        t = t.reshape(tuple(shape))
    return t


# ---------------------------------------------------------------- forward ops


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ContractError(f"matmul: shape mismatch {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise ContractError(f"add: shape mismatch {tuple(a.shape)} + {tuple(b.shape)}") from exc
    return a + b


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    _check_finite(x, "softmax")
    return torch.softmax(x, dim=dim)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    _check_finite(x, "log_softmax")
    return torch.log_softmax(x, dim=dim)


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ContractError("layer_norm: affine parameters must match the last dimension")
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ContractError("embedding_lookup: id out of range")
    return table[ids]


def cross_entropy(logits: torch.Tensor, labels, mask=None) -> torch.Tensor:
    """Mean negative log-probability of ``labels`` over the labelled positions.

    ``logits`` has shape (..., V) and ``labels`` the leading shape. ``mask``
    (same shape as labels) selects the positions that count; all positions
    count when it is omitted.
    """
    _check_finite(logits, "cross_entropy")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.shape[:-1] != labels.shape:
        raise ContractError("cross_entropy: labels do not match logits")
    logp = torch.log_softmax(logits, dim=-1)
    picked = -logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    if mask is None:
        return picked.mean()
    mask = torch.as_tensor(mask, dtype=DTYPE)
    n = mask.sum()
    if float(n) == 0:
        raise ContractError("cross_entropy: no labelled positions")
    return (picked * mask).sum() / n


# ----------------------------------------------------------------- containers


@dataclass
class ParamSet:
    """Ordered, component-tagged parameter tensors.

    Tensors are leaf tensors with ``requires_grad`` set so any computation
    over them is recorded. Updates never mutate in place; they build a new
    ``ParamSet``.
    """

    entries: "OrderedDict[str, tuple[torch.Tensor, str]]" = field(default_factory=OrderedDict)

    def add(self, name: str, tensor, component: str) -> None:
        if name in self.entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        if component not in COMPONENTS:
            raise ContractError(f"unknown component {component!r}")
        t = torch.as_tensor(tensor, dtype=DTYPE).detach().clone().requires_grad_(True)
        self.entries[name] = (t, component)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name][0]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def component(self, name: str) -> str:
        return self.entries[name][1]

    def tensors(self) -> list[torch.Tensor]:
        return [t for t, _ in self.entries.values()]

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors())

    def replace(self, values: dict[str, torch.Tensor]) -> "ParamSet":
        """Copy with the given tensors swapped in (others are shared)."""
        out = ParamSet()
        for name, (t, comp) in self.entries.items():
            new = values.get(name, t)
            if new.shape != t.shape:
                raise ContractError(f"shape mismatch for {name}")
            out.entries[name] = (new.detach().clone().requires_grad_(True) if name in values else t, comp)
        return out

    def clone(self) -> "ParamSet":
        return self.replace({n: t for n, t in zip(self.names(), self.tensors())})

    def perturbed(self, name: str, index: int, delta: float) -> "ParamSet":
        t = self[name].detach().clone()
        t.view(-1)[index] += delta
        return self.replace({name: t})

    def equal(self, other: "ParamSet") -> bool:
        """Bit-exact equality of names, tags and values."""
        if self.names() != other.names():
            return False
        for n in self.names():
            if self.component(n) != other.component(n):
                return False
            if not torch.equal(self[n].detach(), other[n].detach()):
                return False
        return True


class GradSet(OrderedDict):
    """name -> gradient tensor, aligned with a ParamSet."""

    def check_matches(self, params: ParamSet) -> None:
        if list(self.keys()) != params.names():
            raise ContractError("gradient names do not match parameters")
        for n in params:
            if self[n].shape != params[n].shape:
                raise ContractError(f"gradient shape mismatch for {n}")

    def scaled(self, c: float) -> "GradSet":
        return GradSet((n, g * c) for n, g in self.items())

    def norm(self) -> float:
        return math.sqrt(sum(float((g * g).sum()) for g in self.values()))


def zeros_like(params: ParamSet) -> GradSet:
    return GradSet((n, torch.zeros_like(params[n], requires_grad=False)) for n in params)


# ---------------------------------------------------------------- gradients


def backward(loss: torch.Tensor, params: ParamSet) -> GradSet:
    """Exact reverse-mode gradient of a scalar ``loss`` w.r.t. every parameter.

    Parameters that did not take part in the computation receive zeros.
    """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1 or loss.dim() > 1:
        raise ContractError("backward: loss must be a scalar tensor")
    if loss.grad_fn is None:
        raise ContractError("backward: loss was not produced by a recorded computation")
    grads = torch.autograd.grad(loss.reshape(()), params.tensors(), allow_unused=True)
    out = GradSet()
    for name, g in zip(params.names(), grads):
        out[name] = torch.zeros_like(params[name]).detach() if g is None else g.detach()
    return out


def finite_diff_grad(
    loss_fn: Callable[[ParamSet], torch.Tensor | float],
    params: ParamSet,
    coordinate: tuple[str, int],
    h: float = 1e-4,
) -> float:
    """Central difference (f(x+h) - f(x-h)) / 2h along one flat coordinate."""
    if h <= 0:
        raise ContractError("finite_diff_grad: h must be positive")
    name, index = coordinate
    with torch.no_grad():
        up = float(loss_fn(params.perturbed(name, index, h)))
        down = float(loss_fn(params.perturbed(name, index, -h)))
    return (up - down) / (2 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


# ---------------------------------------------------------------- optimizers


def sgd_step(params: ParamSet, grads: GradSet, lr: float) -> ParamSet:
    if lr < 0:
        raise ContractError("sgd_step: lr must be nonnegative")
    grads.check_matches(params)
    with torch.no_grad():
        return params.replace({n: params[n] - lr * grads[n] for n in params})


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: ParamSet) -> "AdamState":
        return cls(
            0,
            {n: torch.zeros_like(params[n]).detach() for n in params},
            {n: torch.zeros_like(params[n]).detach() for n in params},
        )


def adam_step(
    params: ParamSet,
    grads: GradSet,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamSet, AdamState]:
    grads.check_matches(params)
    if set(state.m) != set(params.names()) or set(state.v) != set(params.names()):
        raise ContractError("adam_step: optimizer state does not match parameters")
    t = state.step + 1
    m, v, new = {}, {}, {}
    with torch.no_grad():
        for n in params:
            g = grads[n]
            m[n] = beta1 * state.m[n] + (1 - beta1) * g
            v[n] = beta2 * state.v[n] + (1 - beta2) * g * g
            m_hat = m[n] / (1 - beta1**t)
            v_hat = v[n] / (1 - beta2**t)
            new[n] = params[n] - lr * m_hat / (torch.sqrt(v_hat) + eps)
    return params.replace(new), AdamState(t, m, v)


class Optimizer:
    """Stateful front end over sgd_step / adam_step used by training loops."""

    def __init__(self, kind: str, lr: float, params: ParamSet):
        if kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.state = AdamState.zeros(params) if kind == "adam" else None

    def step(self, params: ParamSet, grads: GradSet) -> ParamSet:
        if self.kind == "sgd":
            return sgd_step(params, grads, self.lr)
        params, self.state = adam_step(params, grads, self.state, self.lr)
        return params
