"""Run configuration and its flat ``section.key = value`` text format.

Example::

    # comments start with '#'
    seed = 0
    model.d_model = 64
    data.n_concepts = 20
    data.forget_ratio = 0.10
    vanilla.epochs = 60
    unlearn.method = MMUnlearner
    unlearn.mask_scope = vision_encoder, language_model

Sections map onto ToyMLLMConfig (model), DataConfig (data), TrainConfig
(vanilla) and UnlearnConfig (unlearn). Values are coerced to the field's
declared type; tuples are comma separated, booleans are true/false.

Seeds are not set per section: the root seed derives them (data = seed+1,
model init = seed+2, training order = seed+3).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datagen import DataConfig, Vocabulary
from .model import ToyMLLMConfig
from .numerics import ContractError
from .train import TrainConfig
from .unlearn import UnlearnConfig

DEFAULT_RATIOS = (0.05, 0.10, 0.15)


class ConfigError(ContractError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: ToyMLLMConfig = field(default_factory=ToyMLLMConfig)
    data: DataConfig = field(default_factory=DataConfig)
    vanilla: TrainConfig = field(default_factory=TrainConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        if not 0 < self.data.forget_ratio < 1:
            raise ConfigError("data.forget_ratio must lie in (0, 1)")

    def resolved(self) -> "RunConfig":
        """Seeds filled in from the root seed and vocab size from the data layout."""
        data = replace(self.data, seed=self.seed + 1)
        model = replace(self.model, vocab_size=Vocabulary(data).size)
        unlearn = replace(self.unlearn, seed=self.seed + 3)
        return replace(self, data=data, model=model, unlearn=unlearn)

    @property
    def init_seed(self) -> int:
        return self.seed + 2

    @property
    def order_seed(self) -> int:
        return self.seed + 3

    def section_dict(self, name: str) -> dict:
        return dataclasses.asdict(getattr(self, name))

    def fingerprint(self, *sections: str) -> str:
        payload = {s: self.section_dict(s) for s in sections}
        payload["seed"] = self.seed
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


_SECTIONS = {"model": ToyMLLMConfig, "data": DataConfig, "vanilla": TrainConfig, "unlearn": UnlearnConfig}


def _coerce(raw: str, tp, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if origin is tuple:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp}") from exc


def parse_config(text: str) -> RunConfig:
    sections: dict[str, dict] = {s: {} for s in _SECTIONS}
    top: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section {sec!r}")
            hints = typing.get_type_hints(_SECTIONS[sec])
            if name not in hints or name == "seed":
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            sections[sec][name] = _coerce(value, hints[name], key)
        elif key == "seed":
            top["seed"] = _coerce(value, int, key)
        elif key == "out":
            top["out"] = value
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        built = {s: cls(**sections[s]) for s, cls in _SECTIONS.items()}
    except (TypeError, ContractError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(**built, **top)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def dump_config(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.seed}", f"out = {cfg.out}"]
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            if f.name == "seed" or (sec == "model" and f.name == "vocab_size"):
                continue
            v = getattr(obj, f.name)
            v = ", ".join(v) if isinstance(v, tuple) else (str(v).lower() if isinstance(v, bool) else v)
            lines.append(f"{sec}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
