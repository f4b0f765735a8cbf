"""Labeled image sets, the procedural stand-in dataset and stratified splits."""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError, ContractError, ValidationError
from ..promptgen import EUROSAT_CLASSES
from ..rng import SplitMix64, derive

NOISE_STD = 0.05


@dataclass
class LabeledDataset:
    """Images (N x C x H x W, values in [0, 1]), labels and unique ids."""

    ids: List[str]
    images: np.ndarray
    labels: np.ndarray
    class_names: Tuple[str, ...]

    def __post_init__(self):
        self.ids = list(self.ids)
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = tuple(self.class_names)
        n = len(self.ids)
        if self.images.ndim != 4 or self.images.shape[0] != n or self.labels.shape != (n,):
            raise ValidationError(f"dataset arrays disagree: {n} ids, images {self.images.shape}, "
                                  f"labels {self.labels.shape}")
        if len(set(self.ids)) != n:
            raise ValidationError("dataset ids must be unique")
        k = len(self.class_names)
        if n and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValidationError(f"labels must lie in [0, {k})")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset([self.ids[i] for i in idx], self.images[idx], self.labels[idx], self.class_names)

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        if other.class_names != self.class_names:
            raise ValidationError("cannot concatenate datasets with different class tables")
        return LabeledDataset(self.ids + other.ids, np.concatenate([self.images, other.images]),
                              np.concatenate([self.labels, other.labels]), self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def class_names_for(k: int) -> Tuple[str, ...]:
    return tuple(EUROSAT_CLASSES[:k]) if k <= len(EUROSAT_CLASSES) else tuple(f"class{c}" for c in range(k))


def palette(c: int, k: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(c / k, 0.65, 0.95))


def class_pattern(c: int, k: int, size: int) -> np.ndarray:
    """Oriented sinusoid in [0.1, 0.9]: frequency 1 + c cycles, angle c * pi / k."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = c * math.pi / k
    return 0.5 + 0.4 * np.sin(2.0 * math.pi * (1 + c) * (x * math.cos(theta) + y * math.sin(theta)) / size)


def synth_image(c: int, k: int, size: int, rng: SplitMix64) -> np.ndarray:
    clean = palette(c, k)[:, None, None] * class_pattern(c, k, size)[None]
    img = np.clip(clean + NOISE_STD * rng.normal(clean.shape), 0.0, 1.0)
    return img.astype(np.float32).astype(np.float64)


def make_synth_dataset(k: int = 10, n_per_class: int = 200, size: int = 32, seed: int = 42,
                       class_names: Optional[Sequence[str]] = None) -> LabeledDataset:
    """Procedural K-class dataset; image i of class c uses the stream derive(seed, c, i).

    Values are rounded to f32 so the set survives an EOT1 round trip unchanged.
    """
    if size < 8:
        raise ConfigError(f"image size must be >= 8, got {size}")
    if n_per_class < 1 or k < 1:
        raise ConfigError("need k >= 1 classes and n_per_class >= 1")
    names = tuple(class_names) if class_names is not None else class_names_for(k)
    if len(names) != k:
        raise ConfigError(f"{len(names)} class names for {k} classes")
    ids, images, labels = [], [], []
    for c in range(k):
        for i in range(n_per_class):
            images.append(synth_image(c, k, size, SplitMix64(derive(seed, "synth", c, i))))
            ids.append(f"{c:02d}-{i:05d}")
            labels.append(c)
    return LabeledDataset(ids, np.stack(images), np.array(labels), names)


@dataclass(frozen=True)
class SplitSpec:
    fractions: Tuple[float, float, float] = (0.7, 0.2, 0.1)
    seed: int = 42

    def __post_init__(self):
        f = tuple(float(v) for v in self.fractions)
        if len(f) != 3 or any(not v > 0 for v in f):
            raise ConfigError(f"split fractions must be three positive numbers, got {self.fractions}")
        if abs(sum(f) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(f)}")
        object.__setattr__(self, "fractions", f)


def split_sizes(n: int, fractions: Sequence[float]) -> List[int]:
    """Largest-remainder allocation; each size is within 1 of n * fraction."""
    exact = [n * f for f in fractions]
    sizes = [math.floor(e) for e in exact]
    order = sorted(range(len(exact)), key=lambda j: (-(exact[j] - sizes[j]), j))
    for j in order[:n - sum(sizes)]:
        sizes[j] += 1
    return sizes


def split(ds: LabeledDataset, spec: SplitSpec) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Stratified train/val/test split, shuffled per class by a class-keyed stream."""
    if len(ds) < 10 * ds.num_classes:
        raise ContractError(f"need at least {10 * ds.num_classes} records to split, got {len(ds)}")
    parts: List[List[int]] = [[], [], []]
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        members = members[SplitMix64.from_keys(spec.seed, "split", c).permutation(members.size)]
        start = 0
        for j, size in enumerate(split_sizes(members.size, spec.fractions)):
            parts[j].extend(members[start:start + size].tolist())
            start += size
    return tuple(ds.subset(sorted(p)) for p in parts)  # type: ignore[return-value]
