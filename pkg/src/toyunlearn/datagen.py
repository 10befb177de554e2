"""Synthetic concept profiles, glyph images and multiple-choice items.

Each concept has a name token, a glyph image and a handful of attribute
values. Visual items ask about an attribute given the glyph; textual items
ask the same attribute given the name token and no image. General items
(solid-colour / cell-count images, fixed key -> value facts) do not depend
on any concept and are never used by unlearning.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import container
from .model import ContractError, Example, TokenSequence

# glyph palette (index 0 is the background)
PALETTE = np.array(
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
)
# solid fills for general colour questions; none of them is a glyph colour
GENERAL_COLORS = np.array(
    [[1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 0.5, 0.0], [0.5, 0.5, 0.5], [0.5, 0.0, 1.0]],
)
COUNT_COLOR = np.array([1.0, 1.0, 1.0])
_GLYPH_MULT = 2654435761  # Knuth's multiplicative hash constant; odd
MAX_COUNT = 6


@dataclass(frozen=True)
class DataConfig:
    n_concepts: int = 20
    forget_ratio: float = 0.10
    n_attributes: int = 7
    values_per_attribute: int = 8
    per_concept_vqa: int = 7
    per_concept_qa: int = 7
    n_choices: int = 4
    n_general_vqa: int = 24
    n_general_qa: int = 16
    general_values: int = 8
    image_height: int = 8
    image_width: int = 8
    cell_size: int = 2
    seed: int = 0


class Vocabulary:
    """Fixed token layout derived from a DataConfig.

    [PAD BOS EOS] [attribute questions] [colour q, count q, fact q]
    [attribute values, attribute-major] [concept names] [colour words]
    [count words] [fact keys] [fact values]
    """

    SPECIALS = ("<pad>", "<bos>", "<eos>")

    def __init__(self, cfg: DataConfig):
        self.cfg = cfg
        self.tokens: list[str] = list(self.SPECIALS)
        self.attr_question = [self._new(f"q:attr{a}") for a in range(cfg.n_attributes)]
        self.q_color = self._new("q:color")
        self.q_count = self._new("q:count")
        self.q_fact = self._new("q:fact")
        self.attr_values = [
            [self._new(f"v:attr{a}:{k}") for k in range(cfg.values_per_attribute)] for a in range(cfg.n_attributes)
        ]
        self.names = [self._new(f"name:{c}") for c in range(cfg.n_concepts)]
        self.color_words = [self._new(f"color:{k}") for k in range(len(GENERAL_COLORS))]
        self.count_words = [self._new(f"count:{k}") for k in range(1, MAX_COUNT + 1)]
        self.fact_keys = [self._new(f"fact:{k}") for k in range(cfg.n_general_qa)]
        self.fact_values = [self._new(f"factval:{k}") for k in range(cfg.general_values)]

    def _new(self, label: str) -> int:
        self.tokens.append(label)
        return len(self.tokens) - 1

    @property
    def bos(self) -> int:
        return 1

    @property
    def eos(self) -> int:
        return 2

    @property
    def size(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ConceptProfile:
    concept_id: int
    glyph_spec: np.ndarray = field(compare=False)  # (cells_h, cells_w) palette indices
    attributes: dict = field(compare=False)  # attribute index -> index into that attribute's value pool

    def __eq__(self, other):
        return (
            isinstance(other, ConceptProfile)
            and self.concept_id == other.concept_id
            and np.array_equal(self.glyph_spec, other.glyph_spec)
            and self.attributes == other.attributes
        )

    def __hash__(self):
        return hash(self.concept_id)


@dataclass(frozen=True, eq=False)
class QAItem:
    modality: str  # "visual" | "textual"
    question: TokenSequence
    choices: tuple[TokenSequence, ...]
    correct_index: int
    concept_id: Optional[int] = None  # None for general items
    image: Optional[np.ndarray] = None
    item_id: str = ""

    def __post_init__(self):
        if self.modality not in ("visual", "textual"):
            raise ContractError(f"unknown modality {self.modality!r}")
        if (self.modality == "visual") != (self.image is not None):
            raise ContractError("visual items need an image and textual items must not have one")
        if len(self.choices) < 2:
            raise ContractError("need at least two choices")
        if len({c.ids for c in self.choices}) != len(self.choices):
            raise ContractError("choices must be pairwise distinct")
        if not 0 <= self.correct_index < len(self.choices):
            raise ContractError("correct_index out of range")

    @property
    def is_general(self) -> bool:
        return self.concept_id is None

    def sequence(self, choice: Optional[int] = None) -> TokenSequence:
        """Question followed by a choice, with the answer span on the choice."""
        c = self.choices[self.correct_index if choice is None else choice]
        q = self.question.ids
        return TokenSequence(q + c.ids, (len(q), len(q) + len(c.ids)))

    def example(self, choice: Optional[int] = None) -> Example:
        return Example(self.sequence(choice), self.image)

    @property
    def answer(self) -> tuple[int, ...]:
        return self.choices[self.correct_index].ids


@dataclass(frozen=True)
class DatasetSplit:
    forget_concepts: tuple[int, ...]
    retain_concepts: tuple[int, ...]
    forget_ratio: float

    def __post_init__(self):
        if set(self.forget_concepts) & set(self.retain_concepts):
            raise ContractError("forget and retain concepts overlap")


# ---------------------------------------------------------------- glyphs


def glyph_spec_for(concept_id: int, cells_h: int = 4, cells_w: int = 4, n_colors: int = len(PALETTE)) -> np.ndarray:
    """Injective concept_id -> cell pattern.

    The id is scrambled by an odd multiplier modulo n_colors**cells (a
    bijection whenever the multiplier is coprime to the modulus) and the
    result written out in base ``n_colors``, one digit per cell.
    """
    n_cells = cells_h * cells_w
    modulus = n_colors**n_cells
    if concept_id + 1 >= modulus:
        raise ContractError("grid too small to give every concept a distinct glyph")
    mult = _GLYPH_MULT
    while math.gcd(mult, modulus) != 1:
        mult += 2
    code = (mult * (concept_id + 1)) % modulus
    digits = []
    for _ in range(n_cells):
        code, d = divmod(code, n_colors)
        digits.append(d)
    return np.array(digits, dtype=np.int64).reshape(cells_h, cells_w)


def render_cells(cells: np.ndarray, palette: np.ndarray, cell_size: int) -> np.ndarray:
    img = palette[cells]  # (ch, cw, 3)
    return np.repeat(np.repeat(img, cell_size, axis=0), cell_size, axis=1).astype(np.float64)


def render_image(profile: ConceptProfile, cell_size: int = 2) -> np.ndarray:
    return render_cells(profile.glyph_spec, PALETTE, cell_size)


# ---------------------------------------------------------------- profiles


def synth_profiles(n: int, seed: int, cfg: DataConfig = DataConfig()) -> list[ConceptProfile]:
    if n < 2:
        raise ContractError("need at least two concepts (one must be retained)")
    rng = np.random.default_rng([seed, 101])
    ch, cw = cfg.image_height // cfg.cell_size, cfg.image_width // cfg.cell_size
    profiles = []
    for cid in range(n):
        values = rng.integers(0, cfg.values_per_attribute, size=cfg.n_attributes)
        attrs = {a: int(v) for a, v in enumerate(values)}
        profiles.append(ConceptProfile(cid, glyph_spec_for(cid, ch, cw), attrs))
    return profiles


def make_split(profiles: Sequence[ConceptProfile], forget_ratio: float, seed: int) -> DatasetSplit:
    """Forget the first round(ratio * n) concepts of a seeded permutation.

    The permutation depends only on the seed, so splits at increasing ratios
    are nested.
    """
    if not 0 <= forget_ratio < 1:
        raise ContractError("forget_ratio must lie in [0, 1)")
    ids = [p.concept_id for p in profiles]
    order = np.random.default_rng([seed, 202]).permutation(len(ids))
    k = int(round(forget_ratio * len(ids)))
    forget = tuple(sorted(ids[i] for i in order[:k]))
    retain = tuple(sorted(ids[i] for i in order[k:]))
    return DatasetSplit(forget, retain, forget_ratio)


# ------------------------------------------------------------------- items


def _choices(correct: int, pool: Sequence[int], n_choices: int, rng) -> tuple[tuple[TokenSequence, ...], int]:
    others = sorted(set(pool) - {correct})
    if len(others) < n_choices - 1:
        raise ContractError(f"only {len(others)} distinct distractor values; need {n_choices - 1}")
    picked = rng.choice(others, size=n_choices - 1, replace=False).tolist()
    options = [correct] + picked
    perm = rng.permutation(n_choices)
    options = [options[i] for i in perm]
    return tuple(TokenSequence((v,), (0, 1)) for v in options), int(np.argmax(perm == 0))


def make_items(
    profiles: Sequence[ConceptProfile],
    vocab: Vocabulary,
    per_concept_vqa: int = 7,
    per_concept_qa: int = 7,
    n_choices: int = 4,
    seed: int = 0,
) -> list[QAItem]:
    """Visual and textual multiple-choice items for every concept.

    Item k of either modality asks about attribute k; distractors are the
    same attribute's values held by other concepts.
    """
    cfg = vocab.cfg
    if n_choices < 2:
        raise ContractError("n_choices must be at least 2")
    if max(per_concept_vqa, per_concept_qa) > cfg.n_attributes:
        raise ContractError("more items per concept than attributes")
    rng = np.random.default_rng([seed, 303])
    items = []
    for p in profiles:
        image = render_image(p, cfg.cell_size)
        for modality, count in (("visual", per_concept_vqa), ("textual", per_concept_qa)):
            for a in range(count):
                values = vocab.attr_values[a]
                pool = [values[q.attributes[a]] for q in profiles if q.concept_id != p.concept_id]
                choices, correct = _choices(values[p.attributes[a]], pool, n_choices, rng)
                if modality == "visual":
                    q = TokenSequence((vocab.bos, vocab.attr_question[a]))
                    img = image
                else:
                    q = TokenSequence((vocab.bos, vocab.names[p.concept_id], vocab.attr_question[a]))
                    img = None
                tag = "vqa" if modality == "visual" else "qa"
                items.append(QAItem(modality, q, choices, correct, p.concept_id, img, f"c{p.concept_id}-{tag}{a}"))
    return items


def make_general_items(vocab: Vocabulary, n_choices: int = 4, seed: int = 0) -> list[QAItem]:
    """Concept-free perception (colour / count) and fact items."""
    cfg = vocab.cfg
    rng = np.random.default_rng([seed, 404])
    ch, cw = cfg.image_height // cfg.cell_size, cfg.image_width // cfg.cell_size
    items = []
    for i in range(cfg.n_general_vqa):
        if i % 2 == 0:
            k = int(rng.integers(len(GENERAL_COLORS)))
            image = np.tile(GENERAL_COLORS[k], (cfg.image_height, cfg.image_width, 1))
            q = TokenSequence((vocab.bos, vocab.q_color))
            choices, correct = _choices(vocab.color_words[k], vocab.color_words, n_choices, rng)
        else:
            k = int(rng.integers(1, MAX_COUNT + 1))
            cells = np.zeros(ch * cw, dtype=np.int64)
            cells[rng.choice(ch * cw, size=k, replace=False)] = 1
            palette = np.stack([PALETTE[0], COUNT_COLOR])
            image = render_cells(cells.reshape(ch, cw), palette, cfg.cell_size)
            q = TokenSequence((vocab.bos, vocab.q_count))
            choices, correct = _choices(vocab.count_words[k - 1], vocab.count_words, n_choices, rng)
        items.append(QAItem("visual", q, choices, correct, None, image, f"general-vqa{i}"))
    fact_answer = rng.integers(0, cfg.general_values, size=cfg.n_general_qa)
    for i in range(cfg.n_general_qa):
        q = TokenSequence((vocab.bos, vocab.fact_keys[i], vocab.q_fact))
        choices, correct = _choices(vocab.fact_values[int(fact_answer[i])], vocab.fact_values, n_choices, rng)
        items.append(QAItem("textual", q, choices, correct, None, None, f"general-qa{i}"))
    return items


# ---------------------------------------------------------------- subsets


def build_targeted_set(items: Sequence[QAItem], split: DatasetSplit) -> list[QAItem]:
    """Visual items of forget concepts."""
    forget = set(split.forget_concepts)
    out = [it for it in items if it.modality == "visual" and it.concept_id in forget]
    if not out:
        warnings.warn("targeted set is empty; unlearning will be a no-op", RuntimeWarning, stacklevel=2)
    return out


def build_preserved_set(items: Sequence[QAItem], split: DatasetSplit) -> list[QAItem]:
    """Forget-concept textual items plus retain-concept visual and textual items."""
    forget, retain = set(split.forget_concepts), set(split.retain_concepts)
    return [
        it
        for it in items
        if (it.concept_id in forget and it.modality == "textual") or it.concept_id in retain
    ]


def build_retain_vqa(items: Sequence[QAItem], split: DatasetSplit) -> list[QAItem]:
    retain = set(split.retain_concepts)
    return [it for it in items if it.modality == "visual" and it.concept_id in retain]


DIMENSIONS = (
    ("forget", "visual"),
    ("forget", "textual"),
    ("retain", "visual"),
    ("retain", "textual"),
    ("general", "visual"),
    ("general", "textual"),
)


def partition(items: Sequence[QAItem], split: DatasetSplit) -> dict[tuple[str, str], list[QAItem]]:
    """Items grouped into the six (set, modality) evaluation dimensions."""
    forget, retain = set(split.forget_concepts), set(split.retain_concepts)
    out: dict[tuple[str, str], list[QAItem]] = {d: [] for d in DIMENSIONS}
    for it in items:
        if it.is_general:
            group = "general"
        elif it.concept_id in forget:
            group = "forget"
        elif it.concept_id in retain:
            group = "retain"
        else:
            continue
        out[(group, it.modality)].append(it)
    return out


# ---------------------------------------------------------------- export


def export_items(items: Sequence[QAItem], jsonl_path, images_path) -> None:
    """Line-delimited item records plus a container holding their images.

    Fields: item_id, modality, concept_id, question, choices, correct_index,
    image (name of the array in the image container, or null).
    """
    arrays = []
    lines = []
    for it in items:
        ref = None
        if it.image is not None:
            ref = it.item_id
            arrays.append((ref, it.image.reshape(-1), None))
        rec = {
            "item_id": it.item_id,
            "modality": it.modality,
            "concept_id": it.concept_id,
            "question": list(it.question.ids),
            "choices": [list(c.ids) for c in it.choices],
            "correct_index": it.correct_index,
            "image": ref,
        }
        lines.append(json.dumps(rec, sort_keys=True))
    shape: list[int] = []
    for it in items:
        if it.image is not None:
            shape = list(it.image.shape)
            break
    Path(jsonl_path).parent.mkdir(parents=True, exist_ok=True)
    Path(jsonl_path).write_text("\n".join(lines) + "\n")
    container.save(images_path, arrays, {"kind": "images", "image_shape": shape})


def import_items(jsonl_path, images_path) -> list[QAItem]:
    meta, arrays = container.load(images_path)
    shape = tuple(meta["image_shape"])
    items = []
    for line in Path(jsonl_path).read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        image = None if r["image"] is None else arrays[r["image"]][0].reshape(shape)
        items.append(
            QAItem(
                r["modality"],
                TokenSequence(r["question"]),
                tuple(TokenSequence(c, (0, len(c))) for c in r["choices"]),
                r["correct_index"],
                r["concept_id"],
                image,
                r["item_id"],
            )
        )
    return items


@dataclass
class Benchmark:
    """Everything generated from one DataConfig."""

    config: DataConfig
    vocab: Vocabulary
    profiles: list[ConceptProfile]
    items: list[QAItem]  # concept items followed by general items
    split: DatasetSplit

    @classmethod
    def build(cls, cfg: DataConfig) -> "Benchmark":
        vocab = Vocabulary(cfg)
        profiles = synth_profiles(cfg.n_concepts, cfg.seed, cfg)
        items = make_items(profiles, vocab, cfg.per_concept_vqa, cfg.per_concept_qa, cfg.n_choices, cfg.seed)
        items += make_general_items(vocab, cfg.n_choices, cfg.seed)
        split = make_split(profiles, cfg.forget_ratio, cfg.seed)
        return cls(cfg, vocab, profiles, items, split)

    def with_ratio(self, forget_ratio: float) -> "Benchmark":
        split = make_split(self.profiles, forget_ratio, self.config.seed)
        return Benchmark(replace(self.config, forget_ratio=forget_ratio), self.vocab, self.profiles, self.items, split)

    @property
    def targeted(self) -> list[QAItem]:
        return build_targeted_set(self.items, self.split)

    @property
    def preserved(self) -> list[QAItem]:
        return build_preserved_set(self.items, self.split)

    @property
    def retain_vqa(self) -> list[QAItem]:
        return build_retain_vqa(self.items, self.split)

    @property
    def retain_items(self) -> list[QAItem]:
        retain = set(self.split.retain_concepts)
        return [it for it in self.items if it.concept_id in retain]
