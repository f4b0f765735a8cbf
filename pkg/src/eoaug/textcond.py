"""Frozen hashed bag-of-words text embedder used as the diffusion condition.

Every word maps to a fixed pseudo-random unit-variance vector derived from
its spelling, so the embedding needs no training and is identical across
runs and platforms. The empty string embeds to the all-zeros null condition.
"""

from __future__ import annotations

import re
from functools import lru_cache
from typing import Sequence

import numpy as np

from .rng import SplitMix64

STOPWORDS = frozenset(
    "a an the of in on with and or to by for at as its it is are this that from into".split()
)
_WORD = re.compile(r"[a-z0-9]+")
_SEED = 0x5EED


def words(text: str):
    return [w for w in _WORD.findall(text.lower()) if w not in STOPWORDS]


@lru_cache(maxsize=4096)
def _word_vector(word: str, dim: int) -> np.ndarray:
    v = SplitMix64.from_keys(_SEED, "word", word).normal(dim)
    v.setflags(write=False)
    return v


def embed_text(text: str, dim: int) -> np.ndarray:
    """L2-normalized mean of the word vectors; zeros when no content words remain."""
    ws = words(text)
    if not ws:
        return np.zeros(dim)
    v = np.mean([_word_vector(w, dim) for w in ws], axis=0)
    return v / np.linalg.norm(v)


def embed_texts(texts: Sequence[str], dim: int) -> np.ndarray:
    return np.stack([embed_text(t, dim) for t in texts]) if len(texts) else np.zeros((0, dim))
