"""Per-class instruction prompts and the generation prompt spec."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Dict, List, Optional, Sequence

from .errors import ValidationError

PLACEHOLDER = "<class>"

EUROSAT_CLASSES = (
    "AnnualCrop", "Forest", "HerbaceousVegetation", "Highway", "Industrial",
    "Pasture", "PermanentCrop", "Residential", "River", "SeaLake",
)


@dataclass(frozen=True)
class MetaPrompt:
    template: str

    def __post_init__(self):
        if not self.template:
            raise ValidationError("meta-prompt template is empty")
        if PLACEHOLDER not in self.template:
            raise ValidationError(f"meta-prompt has no {PLACEHOLDER} placeholder")


@dataclass(frozen=True)
class ClassPrompt:
    class_name: str
    text: str


@dataclass(frozen=True)
class PromptSpec:
    prefix: str
    entries: Dict[str, str]
    per_class_count: int

    def full_prompt(self, class_name: str) -> str:
        return f"{self.prefix} {self.entries[class_name]}"

    def classes(self) -> List[str]:
        return list(self.entries)


def _check_classes(classes: Sequence[str]) -> None:
    if not classes:
        raise ValidationError("class list is empty")
    seen = set()
    dupes = [c for c in classes if c in seen or seen.add(c)]
    if dupes:
        raise ValidationError(f"duplicate class names: {sorted(set(dupes))}")


def instantiate(meta: MetaPrompt, classes: Sequence[str]) -> List[ClassPrompt]:
    """One prompt per class, every placeholder replaced, input order kept."""
    _check_classes(classes)
    return [ClassPrompt(c, meta.template.replace(PLACEHOLDER, c)) for c in classes]


def parse_prompt_spec(document: str, classes: Sequence[str]) -> PromptSpec:
    """Parse and validate a prompt-spec JSON document against the dataset classes."""
    _check_classes(classes)
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"prompt spec is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError("prompt spec must be a JSON object")
    unknown_keys = set(doc) - {"prefix", "per_class_count", "prompts"}
    if unknown_keys:
        raise ValidationError(f"unknown prompt spec keys: {sorted(unknown_keys)}")
    prefix = doc.get("prefix")
    count = doc.get("per_class_count")
    prompts = doc.get("prompts")
    if not isinstance(prefix, str):
        raise ValidationError("prompt spec 'prefix' must be a string")
    if not isinstance(count, int) or isinstance(count, bool):
        raise ValidationError("prompt spec 'per_class_count' must be an integer")
    if count < 1:
        raise ValidationError(f"per_class_count must be >= 1, got {count}")
    if not isinstance(prompts, dict) or not all(isinstance(v, str) for v in prompts.values()):
        raise ValidationError("prompt spec 'prompts' must map class names to strings")
    missing = [c for c in classes if c not in prompts]
    if missing:
        raise ValidationError(f"prompt spec is missing classes: {missing}")
    unknown = [c for c in prompts if c not in classes]
    if unknown:
        raise ValidationError(f"prompt spec names unknown classes: {unknown}")
    return PromptSpec(prefix, {c: prompts[c] for c in classes}, count)


def serialize_prompt_spec(spec: PromptSpec) -> str:
    doc = {"prefix": spec.prefix, "per_class_count": spec.per_class_count, "prompts": dict(spec.entries)}
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def _bundled(name: str) -> str:
    return resources.files("eoaug.data").joinpath(name).read_text(encoding="utf-8")


def default_meta_prompt() -> MetaPrompt:
    return MetaPrompt(_bundled("meta_prompt.txt").rstrip("\n"))


def load_meta_prompt(path: Optional[str] = None) -> MetaPrompt:
    if path is None:
        return default_meta_prompt()
    with open(path, encoding="utf-8") as fh:
        return MetaPrompt(fh.read().rstrip("\n"))


def load_prompt_spec(path: Optional[str], classes: Sequence[str]) -> PromptSpec:
    if path is None:
        return parse_prompt_spec(_bundled("prompt_spec.json"), classes)
    with open(path, encoding="utf-8") as fh:
        return parse_prompt_spec(fh.read(), classes)


def prompts_to_json(prompts: Sequence[ClassPrompt]) -> str:
    return json.dumps([{"class": p.class_name, "prompt": p.text} for p in prompts], indent=2,
                      ensure_ascii=False) + "\n"


def prompts_from_json(text: str) -> List[ClassPrompt]:
    return [ClassPrompt(r["class"], r["prompt"]) for r in json.loads(text)]
