"""Class-conditioned caption language model decoded by beam search.

A smoothed per-class bigram model stands in for a vision-language captioner.
Image content reaches the decoder through three quantized statistic tokens
(brightness tercile, dominant channel, edge-density tercile) that are fed as
context before decoding starts.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError, TrainingError, ValidationError

BOS, EOS = 0, 1
_WORD = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


def tokenize(text: str) -> List[str]:
    return _WORD.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(tokens) < 3:
            raise ValidationError("vocabulary needs BOS, EOS and at least one token")
        if len(set(tokens)) != len(tokens):
            raise ValidationError("vocabulary tokens must be unique")
        self.tokens = tokens
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        return self._index[token]

    def encode(self, words: Iterable[str]) -> List[int]:
        """Indices of the in-vocabulary words; others are dropped."""
        return [self._index[w] for w in words if w in self._index and self._index[w] > EOS]

    def render(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self.tokens)

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        return cls([line for line in text.splitlines() if line])

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls.from_text(resources.files("eoaug.data").joinpath("vocab.txt").read_text(encoding="utf-8"))


@dataclass
class CaptionLM:
    """``logp[c, prev, next]``; the BOS column is -inf because BOS is never emitted."""

    logp: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.logp.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.logp.shape[1]

    def row(self, class_id: int, prev: int) -> np.ndarray:
        return self.logp[class_id, prev]

    def check_class(self, class_id: int) -> None:
        if not 0 <= class_id < self.num_classes:
            raise ContractError(f"class {class_id} unknown to caption model with {self.num_classes} classes")

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "CaptionLM":
        """Build from K x V x V probabilities (BOS column ignored, rows renormalized)."""
        p = np.array(probs, dtype=np.float64)
        p[..., BOS] = 0.0
        p /= p.sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore"):
            return cls(np.log(p))


def fit_caption_lm(corpus: Sequence[Tuple[int, Sequence[int]]], vocab: Vocabulary, k: float,
                   num_classes: Optional[int] = None) -> CaptionLM:
    """Add-k smoothed bigram tables over next tokens V \\ {BOS}.

    Each sequence is wrapped as BOS, tokens..., EOS before counting.
    """
    if not k > 0:
        raise ConfigError(f"smoothing k must be > 0, got {k}")
    v = len(vocab)
    if num_classes is None:
        num_classes = 1 + max((c for c, _ in corpus), default=-1)
    counts = np.zeros((num_classes, v, v))
    seen = np.zeros(num_classes, dtype=bool)
    for c, seq in corpus:
        if not 0 <= c < num_classes:
            raise TrainingError(f"corpus class {c} outside [0, {num_classes})")
        if any(not EOS < t < v for t in seq):
            raise TrainingError(f"sequence for class {c} contains reserved or unknown token ids")
        seen[c] = True
        path = [BOS, *seq, EOS]
        np.add.at(counts[c], (path[:-1], path[1:]), 1.0)
    empty = [c for c in range(num_classes) if not seen[c]]
    if empty:
        raise TrainingError(f"no caption sequences for classes {empty}")
    counts[..., BOS] = 0.0
    probs = counts + k
    probs[..., BOS] = 0.0
    probs /= probs.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return CaptionLM(np.log(probs))


@dataclass(frozen=True)
class BeamConfig:
    width: int = 5
    min_len: int = 10
    max_len: int = 256
    length_penalty: float = -1.0

    def __post_init__(self):
        if self.width < 1:
            raise ConfigError(f"beam width must be >= 1, got {self.width}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")


@dataclass(frozen=True)
class Caption:
    tokens: Tuple[int, ...]
    text: str
    score: float
    logprob: float


def normalized_score(logprob: float, length: int, penalty: float) -> float:
    """``logprob / length ** penalty``; a negative penalty favours short outputs."""
    return logprob / (length ** penalty)


def beam_search(lm: CaptionLM, class_id: int, cfg: BeamConfig, context: Sequence[int] = (),
                vocab: Optional[Vocabulary] = None) -> Caption:
    """Decode the best caption under the length-normalized score.

    Each step ranks every extension of the live hypotheses (EOS included) by
    normalized score, ties going to the lexicographically smaller token
    sequence, and keeps the top ``width``; hypotheses that chose EOS move to the
    finished pool. EOS is unavailable before ``min_len`` tokens and the only
    option at ``max_len``. For penalties <= 0 a normalized score can only
    fall as a hypothesis grows, which allows stopping as soon as the best
    finished caption beats every live bound.
    """
    lm.check_class(class_id)
    start = context[-1] if len(context) else BOS
    p = cfg.length_penalty
    content = np.arange(EOS + 1, lm.vocab_size)
    beams: List[Tuple[Tuple[int, ...], float]] = [((), 0.0)]
    finished: List[Tuple[float, Tuple[int, ...], float]] = []
    while beams:
        candidates = []
        for toks, lp in beams:
            n = len(toks)
            row = lm.row(class_id, toks[-1] if toks else start)
            if n >= cfg.min_len:
                total = lp + row[EOS]
                candidates.append((normalized_score(total, n, p), toks + (EOS,), total, True))
            if n < cfg.max_len:
                ext = lp + row[content]
                # stable sort keeps the smaller token first among equal scores
                top = np.argsort(-ext, kind="stable")[:cfg.width]
                for j in top:
                    total = float(ext[j])
                    candidates.append((normalized_score(total, n + 1, p), toks + (int(content[j]),), total, False))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        beams = []
        for score, seq, total, done in candidates[:cfg.width]:
            if done:
                finished.append((score, seq[:-1], total))
            else:
                beams.append((seq, total))
        if finished and beams and p <= 0:
            best = max(f[0] for f in finished)
            bound = max(lp * max(len(t), cfg.min_len) ** (-p) for t, lp in beams)
            if best > bound:
                break
    score, toks, total = min(finished, key=lambda f: (-f[0], f[1]))
    text = vocab.render(toks) if vocab is not None else " ".join(map(str, toks))
    return Caption(toks, text, float(score), float(total))


# ---------------------------------------------------------------------------
# image statistics and the default corpus
# ---------------------------------------------------------------------------

BRIGHT_TOKENS = ("<bright:low>", "<bright:mid>", "<bright:high>")
TONE_TOKENS = ("<tone:red>", "<tone:green>", "<tone:blue>")
EDGE_TOKENS = ("<edge:low>", "<edge:mid>", "<edge:high>")
EDGE_WORDS = ("smooth", "textured", "detailed")
EDGE_THRESHOLDS = (0.08, 0.16)
OPENERS = (
    ("satellite", "image", "of"),
    ("aerial", "view", "of"),
    ("remote", "sensing", "image", "showing"),
)


def _tercile(value: float, cuts: Tuple[float, float]) -> int:
    return int(value >= cuts[0]) + int(value >= cuts[1])


def image_stat_tokens(img: np.ndarray) -> Tuple[str, str, str]:
    """Brightness tercile, dominant channel and edge-density tercile of a C x H x W image."""
    means = img.mean(axis=(1, 2))
    gray = img.mean(axis=0)
    edges = 0.5 * (np.abs(np.diff(gray, axis=0)).mean() + np.abs(np.diff(gray, axis=1)).mean())
    bright = BRIGHT_TOKENS[_tercile(float(img.mean()), (1 / 3, 2 / 3))]
    tone = TONE_TOKENS[int(np.argmax(means[:3]))]
    return bright, tone, EDGE_TOKENS[_tercile(float(edges), EDGE_THRESHOLDS)]


def default_corpus(vocab: Vocabulary, bodies: Sequence[str]) -> List[Tuple[int, List[int]]]:
    """Templated sentences per class built from each class's prompt body.

    Every sentence starts with the three statistic tokens, then an edge word,
    an opener and the in-vocabulary words of the body.
    """
    corpus = []
    for c, body in enumerate(bodies):
        words = [w for w in tokenize(body) if w in vocab]
        for b in BRIGHT_TOKENS:
            for tone in TONE_TOKENS:
                for e, edge in enumerate(EDGE_TOKENS):
                    for opener in OPENERS:
                        seq = [b, tone, edge, EDGE_WORDS[e], *opener, *words]
                        corpus.append((c, [vocab.index(w) for w in seq]))
    return corpus


def build_vocab_tokens(bodies: Sequence[str]) -> List[str]:
    """Token list for the bundled vocabulary file."""
    tokens = ["<bos>", "<eos>", *BRIGHT_TOKENS, *TONE_TOKENS, *EDGE_TOKENS, *EDGE_WORDS]
    for opener in OPENERS:
        tokens.extend(opener)
    for body in bodies:
        tokens.extend(tokenize(body))
    return list(dict.fromkeys(tokens))


def caption_dataset(images: np.ndarray, labels: Sequence[int], ids: Sequence[str], class_names: Sequence[str],
                    prompts: Dict[str, str], lm: CaptionLM, vocab: Vocabulary, cfg: BeamConfig) -> List[Dict]:
    """One manifest record per image: id, class, prompt, caption, score.

    Decoding is memoized on (class, statistic tokens) since the caption is a
    pure function of both.
    """
    missing = [c for c in sorted(set(int(l) for l in labels)) if class_names[c] not in prompts]
    if missing:
        raise ValidationError(f"no prompt for classes {[class_names[c] for c in missing]}")
    cache: Dict[Tuple[int, Tuple[str, ...]], Caption] = {}
    records = []
    for img, label, image_id in zip(images, labels, ids):
        label = int(label)
        stats = image_stat_tokens(img)
        key = (label, stats)
        if key not in cache:
            context = [BOS] + [vocab.index(s) for s in stats]
            cache[key] = beam_search(lm, label, cfg, context, vocab)
        cap = cache[key]
        name = class_names[label]
        records.append({"id": image_id, "class": name, "prompt": prompts[name], "caption": cap.text,
                        "score": cap.score})
    return records


def caption_length_ok(cap: Caption, cfg: BeamConfig) -> bool:
    return cfg.min_len <= len(cap.tokens) <= cfg.max_len


def logprob_of(lm: CaptionLM, class_id: int, tokens: Sequence[int], context: Sequence[int] = ()) -> float:
    """Log-probability of ``tokens`` followed by EOS."""
    prev = context[-1] if len(context) else BOS
    total = 0.0
    for tok in [*tokens, EOS]:
        total += lm.row(class_id, prev)[tok]
        prev = tok
    return float(total)

