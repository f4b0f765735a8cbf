"""Desk-scale dual encoder: a small conv image tower and a bag-of-words text tower."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .. import tensor as T
from ..errors import ContractError, ValidationError
from ..rng import SplitMix64
from ..tensor import ParamSet, Tensor

_WORD = re.compile(r"[a-z0-9]+")


def text_words(text: str) -> List[str]:
    return _WORD.findall(text.lower())


class TextVocab:
    """Word table of the text tower, built from class names and prompt templates."""

    def __init__(self, texts: Sequence[str]):
        self.words = list(dict.fromkeys(w for t in texts for w in text_words(t)))
        if not self.words:
            raise ValidationError("text vocabulary is empty")
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def bag(self, texts: Sequence[str]) -> np.ndarray:
        """Rows of word frequencies (each row sums to 1); unknown words are ignored."""
        out = np.zeros((len(texts), len(self.words)))
        for r, text in enumerate(texts):
            ids = [self.index[w] for w in text_words(text) if w in self.index]
            if not ids:
                raise ContractError(f"text {text!r} has no known words")
            np.add.at(out[r], ids, 1.0 / len(ids))
        return out


@dataclass(frozen=True)
class EncoderSpec:
    channels: int = 3
    widths: tuple = (16, 32, 32)
    embed_dim: int = 32


class DualEncoder:
    """conv-relu-pool x2, conv-relu, global mean, dense, L2 norm; text: word table mean, dense, L2 norm."""

    def __init__(self, params: ParamSet, spec: EncoderSpec, vocab: TextVocab):
        self.params = params
        self.spec = spec
        self.vocab = vocab

    @classmethod
    def init(cls, spec: EncoderSpec, vocab: TextVocab, seed: int) -> "DualEncoder":
        rng = SplitMix64.from_keys(seed, "encoder-init")
        w1, w2, w3 = spec.widths
        e = spec.embed_dim
        p = ParamSet()
        for name, cin, cout in (("img.c1", spec.channels, w1), ("img.c2", w1, w2), ("img.c3", w2, w3)):
            p.add(f"{name}.k", math.sqrt(2.0 / (cin * 9)) * rng.normal((cout, cin, 3, 3)))
            p.add(f"{name}.b", np.zeros(cout))
        p.add("img.proj.w", rng.normal((w3, e)) / math.sqrt(w3))
        p.add("img.proj.b", np.zeros(e))
        p.add("txt.table", rng.normal((len(vocab), e)))
        p.add("txt.proj.w", rng.normal((e, e)) / math.sqrt(e))
        p.add("txt.proj.b", np.zeros(e))
        return cls(p, spec, vocab)

    def _conv(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        return T.relu(T.add_channel(T.conv2d(x, p[f"{name}.k"]), p[f"{name}.b"]))

    def encode_images(self, images) -> Tensor:
        p = self.params
        x = T.as_tensor(images)
        if x.ndim != 4:
            raise ContractError(f"image batch must be N x C x H x W, got {x.shape}")
        h = T.avg_pool2(self._conv(x, "img.c1"))
        h = T.avg_pool2(self._conv(h, "img.c2"))
        h = T.mean(self._conv(h, "img.c3"), axes=(2, 3))
        return T.l2_normalize(T.add_bias(T.matmul(h, p["img.proj.w"]), p["img.proj.b"]))

    def encode_texts(self, texts: Sequence[str]) -> Tensor:
        p = self.params
        h = T.matmul(Tensor(self.vocab.bag(texts)), p["txt.table"])
        return T.l2_normalize(T.add_bias(T.matmul(h, p["txt.proj.w"]), p["txt.proj.b"]))

    def image_embeddings(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        """Inference-only embedding in fixed-size chunks."""
        if len(images) == 0:
            return np.zeros((0, self.spec.embed_dim))
        return np.concatenate([self.encode_images(images[i:i + batch]).data
                               for i in range(0, len(images), batch)])

    def scores(self, images: np.ndarray, texts: Sequence[str]) -> np.ndarray:
        """Cosine similarity of every image with every text (n x len(texts))."""
        return self.image_embeddings(images) @ self.encode_texts(texts).data.T
