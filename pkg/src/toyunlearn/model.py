"""Toy vision-language model: patch encoder -> linear projector -> causal LM.

Visual tokens are prepended to the text tokens and position indices run
continuously across the boundary. Every parameter carries a component tag
(``vision_encoder``, ``connector`` or ``language_model``) so masks and
ablations can be scoped per component.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import container
from .numerics import (
    ContractError,
    DTYPE,
    ParamSet,
    add,
    embedding_lookup,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    softmax,
)


@dataclass(frozen=True)
class ToyMLLMConfig:
    image_height: int = 8
    image_width: int = 8
    channels: int = 3
    patch_size: int = 4
    d_vision: int = 32
    vision_layers: int = 2
    vision_heads: int = 2
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 128
    max_seq_len: int = 16
    mlp_ratio: int = 4
    init_std: float = 0.1

    def __post_init__(self):
        if self.n_layers < 1 or self.vision_layers < 0:
            raise ContractError("layer counts must be positive")
        if self.d_model % self.n_heads or self.d_vision % max(self.vision_heads, 1):
            raise ContractError("model width must be divisible by head count")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ContractError("patch size must divide the image grid")

    @property
    def n_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_height, self.image_width, self.channels)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    answer_span: tuple[int, int] = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        start, end = self.answer_span
        if not 0 <= start <= end <= len(self.ids):
            raise ContractError(f"answer span {self.answer_span} outside sequence of length {len(self.ids)}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def answer(self) -> tuple[int, ...]:
        return self.ids[self.answer_span[0] : self.answer_span[1]]


@dataclass(frozen=True)
class Example:
    """One (image?, token sequence) pair fed to the model."""

    tokens: TokenSequence
    image: Optional[np.ndarray] = None


@dataclass
class ToyMLLM:
    config: ToyMLLMConfig
    params: ParamSet = field(repr=False)

    def with_params(self, params: ParamSet) -> "ToyMLLM":
        return ToyMLLM(self.config, params)

    def clone(self) -> "ToyMLLM":
        return ToyMLLM(self.config, self.params.clone())


# --------------------------------------------------------------------- init


def _block_shapes(prefix: str, d: int, hidden: int) -> list[tuple[str, tuple[int, ...], str]]:
    # (name, shape, init kind); linear weights are stored (out, in)
    return [
        (f"{prefix}.ln1.weight", (d,), "one"),
        (f"{prefix}.ln1.bias", (d,), "zero"),
        (f"{prefix}.attn.qkv.weight", (3 * d, d), "normal"),
        (f"{prefix}.attn.qkv.bias", (3 * d,), "zero"),
        (f"{prefix}.attn.out.weight", (d, d), "normal"),
        (f"{prefix}.attn.out.bias", (d,), "zero"),
        (f"{prefix}.ln2.weight", (d,), "one"),
        (f"{prefix}.ln2.bias", (d,), "zero"),
        (f"{prefix}.mlp.fc.weight", (hidden, d), "normal"),
        (f"{prefix}.mlp.fc.bias", (hidden,), "zero"),
        (f"{prefix}.mlp.proj.weight", (d, hidden), "normal"),
        (f"{prefix}.mlp.proj.bias", (d,), "zero"),
    ]


def parameter_layout(cfg: ToyMLLMConfig) -> list[tuple[str, tuple[int, ...], str, str]]:
    """Deterministic (name, shape, init, component) listing of all parameters."""
    out = []
    dv, dm = cfg.d_vision, cfg.d_model
    vision = [
        ("vision.patch.weight", (dv, cfg.patch_dim), "normal"),
        ("vision.patch.bias", (dv,), "zero"),
        ("vision.pos", (cfg.n_patches, dv), "normal"),
    ]
    for i in range(cfg.vision_layers):
        vision += _block_shapes(f"vision.blocks.{i}", dv, cfg.mlp_ratio * dv)
    vision += [("vision.ln_f.weight", (dv,), "one"), ("vision.ln_f.bias", (dv,), "zero")]
    out += [(n, s, k, "vision_encoder") for n, s, k in vision]
    out += [
        ("connector.weight", (dm, dv), "normal", "connector"),
        ("connector.bias", (dm,), "zero", "connector"),
    ]
    lm = [
        ("lm.tok_emb", (cfg.vocab_size, dm), "normal"),
        ("lm.pos_emb", (cfg.max_seq_len, dm), "normal"),
    ]
    for i in range(cfg.n_layers):
        lm += _block_shapes(f"lm.blocks.{i}", dm, cfg.mlp_ratio * dm)
    lm += [
        ("lm.ln_f.weight", (dm,), "one"),
        ("lm.ln_f.bias", (dm,), "zero"),
        ("lm.head.weight", (cfg.vocab_size, dm), "normal"),
        ("lm.head.bias", (cfg.vocab_size,), "zero"),
    ]
    out += [(n, s, k, "language_model") for n, s, k in lm]
    return out


def init_model(cfg: ToyMLLMConfig, seed: int) -> ToyMLLM:
    """Initialise from numpy's PCG64 stream so runs agree across platforms."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = ParamSet()
    for name, shape, kind, comp in parameter_layout(cfg):
        if kind == "normal":
            value = rng.standard_normal(shape) * cfg.init_std
        elif kind == "one":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params.add(name, value, comp)
    return ToyMLLM(cfg, params)


def parameter_group(name: str) -> tuple[int, str]:
    """(layer index, sublayer kind) used to bucket coordinates for reports.

    Kinds: attention, mlp, embedding (LM embeddings and output head),
    vision, connector. Parameters outside a numbered block get layer -1,
    except the LM output side which gets layer 99 so it sorts last.
    """
    parts = name.split(".")
    if parts[0] == "connector":
        return -1, "connector"
    if parts[0] == "vision":
        layer = int(parts[2]) if parts[1] == "blocks" else -1
        return layer, "vision"
    if parts[1] == "blocks":
        layer = int(parts[2])
        return layer, "attention" if parts[3] in ("ln1", "attn") else "mlp"
    if parts[1] in ("tok_emb", "pos_emb"):
        return -1, "embedding"
    return 99, "embedding"


# ------------------------------------------------------------------ forward


def _linear(x: torch.Tensor, params: ParamSet, prefix: str) -> torch.Tensor:
    return add(matmul(x, params[f"{prefix}.weight"].T), params[f"{prefix}.bias"])


def _attention(x: torch.Tensor, params: ParamSet, prefix: str, n_heads: int, causal: bool) -> torch.Tensor:
    b, t, d = x.shape
    hd = d // n_heads
    qkv = _linear(x, params, f"{prefix}.qkv")
    q, k, v = qkv.split(d, dim=-1)
    q = q.reshape(b, t, n_heads, hd).transpose(1, 2)
    k = k.reshape(b, t, n_heads, hd).transpose(1, 2)
    v = v.reshape(b, t, n_heads, hd).transpose(1, 2)
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(hd)
    if causal:
        future = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(future, -1e30)
    att = softmax(scores, dim=-1)
    y = matmul(att, v).transpose(1, 2).reshape(b, t, d)
    return _linear(y, params, f"{prefix}.out")


def _block(x: torch.Tensor, params: ParamSet, prefix: str, n_heads: int, causal: bool) -> torch.Tensor:
    h = layer_norm(x, params[f"{prefix}.ln1.weight"], params[f"{prefix}.ln1.bias"])
    x = add(x, _attention(h, params, f"{prefix}.attn", n_heads, causal))
    h = layer_norm(x, params[f"{prefix}.ln2.weight"], params[f"{prefix}.ln2.bias"])
    h = _linear(gelu(_linear(h, params, f"{prefix}.mlp.fc")), params, f"{prefix}.mlp.proj")
    return add(x, h)


def patchify(cfg: ToyMLLMConfig, images) -> torch.Tensor:
    """(B, H, W, C) pixels -> (B, n_patches, patch_dim), patches in row-major order."""
    x = torch.as_tensor(np.asarray(images, dtype=np.float64), dtype=DTYPE)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if tuple(x.shape[1:]) != cfg.image_shape:
        raise ContractError(f"image shape {tuple(x.shape[1:])} does not match {cfg.image_shape}")
    b, p = x.shape[0], cfg.patch_size
    gh, gw = cfg.image_height // p, cfg.image_width // p
    x = x.reshape(b, gh, p, gw, p, cfg.channels).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, cfg.patch_dim)


def encode_images(model: ToyMLLM, images) -> torch.Tensor:
    cfg, params = model.config, model.params
    x = add(_linear(patchify(cfg, images), params, "vision.patch"), params["vision.pos"])
    for i in range(cfg.vision_layers):
        x = _block(x, params, f"vision.blocks.{i}", cfg.vision_heads, causal=False)
    return layer_norm(x, params["vision.ln_f.weight"], params["vision.ln_f.bias"])


def encode_image(model: ToyMLLM, image) -> torch.Tensor:
    """One d_vision row per patch."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.config.image_shape:
        raise ContractError(f"image shape {image.shape} does not match {model.config.image_shape}")
    return encode_images(model, image[None])[0]


def project(model: ToyMLLM, visual: torch.Tensor) -> torch.Tensor:
    if visual.shape[-1] != model.config.d_vision:
        raise ContractError("project: visual features must have d_vision columns")
    return _linear(visual, model.params, "connector")


def _lm_stack(model: ToyMLLM, h_visual: Optional[torch.Tensor], ids: torch.Tensor) -> torch.Tensor:
    cfg, params = model.config, model.params
    x = embedding_lookup(params["lm.tok_emb"], ids)
    if h_visual is not None:
        x = torch.cat([h_visual, x], dim=1)
    t = x.shape[1]
    if t > cfg.max_seq_len:
        raise ContractError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    x = add(x, params["lm.pos_emb"][:t])
    for i in range(cfg.n_layers):
        x = _block(x, params, f"lm.blocks.{i}", cfg.n_heads, causal=True)
    x = layer_norm(x, params["lm.ln_f.weight"], params["lm.ln_f.bias"])
    return _linear(x, params, "lm.head")


def lm_forward(model: ToyMLLM, h_visual: Optional[torch.Tensor], tokens: TokenSequence) -> torch.Tensor:
    """Causal logits (visual + text positions, vocab).

    Without ``h_visual`` this is the text-only path: no vision encoder or
    connector parameter is touched.
    """
    ids = torch.tensor([tokens.ids], dtype=torch.long)
    hv = None if h_visual is None else h_visual.unsqueeze(0)
    return _lm_stack(model, hv, ids)[0]


def text_logits(model: ToyMLLM, examples: Sequence[Example]) -> list[torch.Tensor]:
    """Logits at the text positions of each example, shape (len(ids), vocab).

    Row j predicts text token j + 1. Examples are grouped by (has image,
    length) and run as batches; output order follows the input order.
    """
    groups: dict[tuple[bool, int], list[int]] = {}
    for i, ex in enumerate(examples):
        groups.setdefault((ex.image is not None, len(ex.tokens)), []).append(i)
    out: list[Optional[torch.Tensor]] = [None] * len(examples)
    for (has_image, _), idx in sorted(groups.items()):
        ids = torch.tensor([examples[i].tokens.ids for i in idx], dtype=torch.long)
        hv = None
        if has_image:
            hv = project(model, encode_images(model, np.stack([examples[i].image for i in idx])))
        logits = _lm_stack(model, hv, ids)
        offset = 0 if hv is None else hv.shape[1]
        for row, i in enumerate(idx):
            out[i] = logits[row, offset:]
    return out  # type: ignore[return-value]


def answer_logprobs(model: ToyMLLM, examples: Sequence[Example]) -> list[torch.Tensor]:
    """Per-token log-probabilities of each example's answer span."""
    logits = text_logits(model, examples)
    out = []
    for ex, lg in zip(examples, logits):
        start, end = ex.tokens.answer_span
        if end <= start:
            raise ContractError("answer span is empty")
        if start < 1:
            raise ContractError("answer span must follow at least one prompt token")
        targets = torch.tensor(ex.tokens.ids[start:end], dtype=torch.long)
        logp = log_softmax(lg[start - 1 : end - 1], dim=-1)
        out.append(logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1))
    return out


def _example(image, tokens: TokenSequence) -> Example:
    return Example(tokens, None if image is None else np.asarray(image, dtype=np.float64))


def nll_loss(model: ToyMLLM, image, tokens: TokenSequence) -> torch.Tensor:
    """Mean negative log-likelihood over the answer tokens.

    Multiply by the span length to recover the summed form.
    """
    return -answer_logprobs(model, [_example(image, tokens)])[0].mean()


def sequence_logprob(model: ToyMLLM, image, tokens: TokenSequence) -> torch.Tensor:
    """Summed (length-unnormalised) log-probability of the answer span."""
    return answer_logprobs(model, [_example(image, tokens)])[0].sum()


def batch_nll(model: ToyMLLM, examples: Sequence[Example]) -> torch.Tensor:
    """Dataset-level loss: mean over examples of their per-token mean NLL."""
    if not examples:
        raise ContractError("batch_nll: empty batch")
    lps = answer_logprobs(model, examples)
    return -torch.stack([lp.mean() for lp in lps]).mean()


def batch_sequence_logprob(model: ToyMLLM, examples: Sequence[Example]) -> torch.Tensor:
    return torch.stack([lp.sum() for lp in answer_logprobs(model, examples)])


@torch.no_grad()
def generate_greedy(
    model: ToyMLLM,
    image,
    prompt: TokenSequence,
    max_new: int,
    eos_id: Optional[int] = None,
) -> TokenSequence:
    """Argmax decoding. The end token, if produced, is not appended."""
    ids = list(prompt.ids)
    hv = None
    if image is not None:
        hv = project(model, encode_image(model, image))
    for _ in range(max_new):
        logits = lm_forward(model, hv, TokenSequence(ids))
        nxt = int(torch.argmax(logits[-1]))
        if eos_id is not None and nxt == eos_id:
            break
        ids.append(nxt)
    return TokenSequence(ids, (len(prompt.ids), len(ids)))


def config_dict(cfg: ToyMLLMConfig) -> dict:
    return asdict(cfg)


def save_model(model: ToyMLLM, path, meta: Optional[dict] = None) -> str:
    """Checkpoint: config plus component-tagged float64 tensors (see container)."""
    arrays = [(n, model.params[n].detach().numpy(), model.params.component(n)) for n in model.params]
    return container.save(path, arrays, {"kind": "checkpoint", "config": config_dict(model.config), **(meta or {})})


def load_model(path) -> ToyMLLM:
    meta, arrays = container.load(path)
    if meta.get("kind") != "checkpoint":
        raise ContractError(f"{path} is not a model checkpoint")
    params = ParamSet()
    for name, (arr, tag) in arrays.items():
        params.add(name, arr, tag)
    return ToyMLLM(ToyMLLMConfig(**meta["config"]), params)
