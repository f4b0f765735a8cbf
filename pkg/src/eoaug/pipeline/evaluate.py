"""Top-k and zero-shot evaluation and the comparison report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ContractError, ValidationError
from ..promptgen import PLACEHOLDER

ZERO_SHOT_TEMPLATE = f"a remote sensing image of {PLACEHOLDER}"


def topk_accuracy(scores: np.ndarray, labels: Sequence[int], k: int) -> float:
    """Fraction of rows whose label ranks among the k highest scores.

    Equal scores rank the lower class index first, so a label tied with the
    k-th score counts only if its index is small enough.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ContractError(f"scores {scores.shape} do not match {labels.shape[0]} labels")
    n, num_classes = scores.shape
    if not 1 <= k <= num_classes:
        raise ContractError(f"k must lie in [1, {num_classes}], got {k}")
    if n == 0:
        raise ContractError("no rows to evaluate")
    own = scores[np.arange(n), labels]
    cols = np.arange(num_classes)[None, :]
    ahead = (scores > own[:, None]) | ((scores == own[:, None]) & (cols < labels[:, None]))
    return float(np.mean(ahead.sum(axis=1) < k))


def zero_shot_eval(encoder, class_names: Sequence[str], images: np.ndarray, labels: Sequence[int],
                   template: str = ZERO_SHOT_TEMPLATE) -> float:
    """Top-1 accuracy of nearest class-text embedding under ``template``."""
    if not class_names:
        raise ContractError("zero-shot evaluation needs at least one class")
    texts = [template.replace(PLACEHOLDER, c) for c in class_names]
    return topk_accuracy(encoder.scores(images, texts), labels, 1)


@dataclass(frozen=True)
class EvalReport:
    """One comparison row; ``headline`` names the metric compared against ``baseline``."""

    model: str
    strategy: str
    top1: float
    top3: float
    zero_shot: Optional[float] = None
    baseline: Optional[float] = None
    headline: str = "top1"

    def __post_init__(self):
        if not 0.0 <= self.top1 <= self.top3 <= 1.0:
            raise ValidationError(f"need 0 <= top1 <= top3 <= 1, got {self.top1}, {self.top3}")
        if self.headline not in ("top1", "top3", "zero_shot"):
            raise ValidationError(f"unknown headline metric {self.headline!r}")
        if self.headline == "zero_shot" and self.zero_shot is None:
            raise ValidationError("zero_shot headline needs a zero_shot value")

    @property
    def ours(self) -> float:
        return getattr(self, self.headline)

    @property
    def delta(self) -> Optional[float]:
        return None if self.baseline is None else self.ours - self.baseline

    def to_json(self) -> Dict:
        doc = asdict(self)
        doc["ours"] = self.ours
        doc["delta"] = self.delta
        return doc


def format_accuracy(fraction: float) -> str:
    """Percentage with two decimals, dropping one trailing zero (0.411 -> '41.1%')."""
    text = f"{fraction * 100:.2f}"
    return (text[:-1] if text.endswith("0") else text) + "%"


def format_delta(fraction: float) -> str:
    """Signed two-decimal percentage; rounds to '+0.00%' rather than '-0.00%'."""
    value = round(fraction * 100, 2) or 0.0
    return f"{value:+.2f}%"


def emit_report(results: Sequence[EvalReport]) -> Tuple[str, str]:
    """JSON (full precision) and a markdown table Model | Accuracy | Ours | Delta."""
    if not results:
        raise ContractError("report needs at least one result")
    doc = {"results": [r.to_json() for r in results]}
    lines = ["| Model | Accuracy | Ours | Delta |", "|---|---|---|---|"]
    for r in results:
        base = "n/a" if r.baseline is None else format_accuracy(r.baseline)
        delta = "n/a" if r.delta is None else format_delta(r.delta)
        lines.append(f"| {r.model} | {base} | {format_accuracy(r.ours)} | {delta} |")
    return json.dumps(doc, indent=2, sort_keys=True) + "\n", "\n".join(lines) + "\n"


def report_cells(result: EvalReport) -> List[str]:
    return [format_accuracy(result.baseline) if result.baseline is not None else "n/a",
            format_accuracy(result.ours), format_delta(result.delta) if result.delta is not None else "n/a"]
