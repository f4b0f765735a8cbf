"""Pipeline configuration: nested dataclasses with a strict JSON loader.

Defaults carry the reference hyperparameters (caption search, diffusion
fine-tuning loop, classifier optimizer and schedule). Desk-scale runs
override what they need through a config file or dotted ``key=value``
overrides.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .errors import ConfigError
from .trainkit import AdamwConfig, LoopConfig, Scheduler, SgdConfig

STRATEGIES = ("Baseline", "Basic", "Advanced", "AutoAugment", "Diffusion")


@dataclass(frozen=True)
class DataConfig:
    classes: int = 10
    per_class: int = 200
    size: int = 32
    split: Tuple[float, float, float] = (0.7, 0.2, 0.1)


@dataclass(frozen=True)
class CaptionConfig:
    width: int = 5
    min_len: int = 10
    max_len: int = 256
    length_penalty: float = -1.0
    smoothing: float = 0.1


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    widths: Tuple[int, int, int] = (16, 32, 16)
    emb_dim: int = 32
    groups: int = 8
    cond_dropout: float = 0.1
    guidance_scale: float = 1.0


@dataclass(frozen=True)
class PretrainConfig:
    base_per_class: int = 100
    optimizer: AdamwConfig = field(default_factory=AdamwConfig)
    loop: LoopConfig = field(default_factory=lambda: LoopConfig(epochs=20, micro_batch=1, accumulation_steps=4,
                                                                clip_max_norm=1.0))


@dataclass(frozen=True)
class FinetuneConfig:
    lora_rank: int = 4
    optimizer: AdamwConfig = field(default_factory=AdamwConfig)
    loop: LoopConfig = field(default_factory=lambda: LoopConfig(epochs=20, micro_batch=1, accumulation_steps=4,
                                                                clip_max_norm=1.0,
                                                                scheduler=Scheduler("constant")))


@dataclass(frozen=True)
class AugmentConfig:
    prompt_spec: Optional[str] = None
    per_class_count: Optional[int] = None
    chunk: int = 50


@dataclass(frozen=True)
class ClassifierConfig:
    optimizer: SgdConfig = field(default_factory=SgdConfig)
    loop: LoopConfig = field(default_factory=lambda: LoopConfig(
        epochs=5, micro_batch=32, accumulation_steps=1, clip_max_norm=None,
        scheduler=Scheduler("cosine", t_max=5.0, eta_min=1e-8), early_stop_patience=2))
    temperature: float = 0.07
    embed_dim: int = 32
    widths: Tuple[int, int, int] = (16, 32, 32)
    strategies: Tuple[str, ...] = ("Baseline", "Diffusion")
    seeds: int = 1
    zero_shot: bool = True
    zero_shot_template: str = "a remote sensing image of <class>"
    zero_shot_holdout: float = 0.1

    def __post_init__(self):
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategies {bad}; expected one of {list(STRATEGIES)}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.seeds < 1:
            raise ConfigError("classifier seeds must be >= 1")
        if not 0 < self.zero_shot_holdout < 1:
            raise ConfigError("zero_shot_holdout must lie in (0, 1)")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 42
    meta_prompt: Optional[str] = None
    data: DataConfig = field(default_factory=DataConfig)
    caption: CaptionConfig = field(default_factory=CaptionConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)


# ---------------------------------------------------------------------------
# (de)serialization
# ---------------------------------------------------------------------------

def to_dict(cfg) -> Dict[str, Any]:
    def convert(v):
        if dataclasses.is_dataclass(v):
            return {f.name: convert(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [convert(x) for x in v]
        return v

    return convert(cfg)


def dumps(cfg) -> str:
    return json.dumps(to_dict(cfg), indent=2) + "\n"


def _build(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = sorted(set(value) - names)
        if unknown:
            raise ConfigError(f"{where}: unknown keys {unknown}")
        kwargs = {k: _build(hints[k], v, f"{where}.{k}" if where else k) for k, v in value.items()}
        try:
            return tp(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where or 'config'}: {exc}") from None
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _build(inner[0], value, where)
    if origin in (tuple, Tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_build(args[0], v, where) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} values, got {len(value)}")
        return tuple(_build(a, v, where) for a, v in zip(args, value))
    if origin in (list, List):
        return [_build(args[0], v, where) for v in value]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(doc: Dict[str, Any]) -> PipelineConfig:
    """Strict build: unknown keys and wrongly typed values raise ConfigError; missing keys take defaults."""
    return _build(PipelineConfig, doc, "")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply dotted ``key=value`` overrides; values are JSON when they parse, strings otherwise."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        parts = key.split(".")
        node = doc
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
            node = child
        node[parts[-1]] = _parse_value(raw)
    return doc


def bundled_config_names() -> List[str]:
    return sorted(p.name for p in resources.files("eoaug.data").joinpath("configs").iterdir()
                  if p.name.endswith(".json"))


def read_config_text(name: Optional[str]) -> str:
    """Read a config from a path, or a bundled fixture by file name (``.json`` optional)."""
    if name is None:
        return "{}"
    path = Path(name)
    if path.is_file():
        return path.read_text(encoding="utf-8")
    names = bundled_config_names()
    for candidate in (path.name, path.name + ".json"):
        if candidate in names:
            return resources.files("eoaug.data").joinpath("configs").joinpath(candidate).read_text(encoding="utf-8")
    raise ConfigError(f"config {name!r} not found (bundled: {', '.join(bundled_config_names())})")


def load_config(name: Optional[str] = None, overrides: Optional[List[str]] = None,
                seed: Optional[int] = None) -> PipelineConfig:
    try:
        doc = json.loads(read_config_text(name))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {name!r} is not valid JSON: {exc}") from None
    doc = apply_overrides(doc, list(overrides or []))
    if seed is not None:
        doc["seed"] = seed
    return from_dict(doc)
