"""Policy-file-driven AutoAugment on unit-interval images.

Magnitudes use a 0-9 scale. Signed ops (rotate, shear, translate,
brightness, contrast) draw a random sign per application. Per op:

=========== ===============================================
Rotate      degrees = 30 * m / 9
ShearX/Y    shear = 0.3 * m / 9
TranslateX/Y pixels = (150 / 331) * extent * m / 9
Brightness  factor = 1 +/- 0.9 * m / 9
Contrast    factor = 1 +/- 0.9 * m / 9, blended with the grey mean
Posterize   bits = 8 - round(4 * m / 9)
Solarize    threshold = 1 - m / 9
Invert      no magnitude
Equalize    no magnitude
=========== ===============================================
"""

from __future__ import annotations

import json
from importlib import resources
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors import PolicyError
from ..rng import SplitMix64
from .augment import affine_warp, rotate

Op = Tuple[str, float, Optional[int]]
SubPolicy = Tuple[Op, Op]

MAX_MAGNITUDE = 9
NO_MAGNITUDE = frozenset({"Invert", "Equalize"})
OPS = frozenset({"Rotate", "ShearX", "ShearY", "TranslateX", "TranslateY", "Brightness", "Contrast",
                 "Posterize", "Solarize"}) | NO_MAGNITUDE


def quantize8(img: np.ndarray) -> np.ndarray:
    """Round-half-up to 8-bit levels."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.int64)


def invert(img: np.ndarray) -> np.ndarray:
    return 1.0 - img


def solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    """Invert values at or above ``threshold``; 1.0 leaves every pixel alone, 0.0 inverts all."""
    return np.where(img * 255.0 >= threshold * 256.0, 1.0 - img, img)


def posterize(img: np.ndarray, bits: int) -> np.ndarray:
    """Keep the top ``bits`` bits of each 8-bit level."""
    mask = (0xFF << (8 - bits)) & 0xFF
    return (quantize8(img) & mask) / 255.0


def equalize(img: np.ndarray) -> np.ndarray:
    """Per-channel histogram equalization over 8-bit levels."""
    q = quantize8(img)
    out = np.empty_like(img)
    for ch in range(q.shape[0]):
        hist = np.bincount(q[ch].ravel(), minlength=256)
        nonzero = hist[hist > 0]
        step = (int(hist.sum()) - int(nonzero[-1])) // 255
        if step == 0:
            out[ch] = q[ch] / 255.0
            continue
        lut = np.concatenate([[0], np.cumsum(hist)[:-1]])
        lut = np.clip((lut + step // 2) // step, 0, 255)
        out[ch] = lut[q[ch]] / 255.0
    return out


def brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(img * factor, 0.0, 1.0)


def contrast(img: np.ndarray, factor: float) -> np.ndarray:
    mean = img.mean(axis=0).mean() if img.shape[0] else 0.0
    return np.clip(mean + factor * (img - mean), 0.0, 1.0)


def _signed(rng: SplitMix64, value: float) -> float:
    return -value if rng.random() < 0.5 else value


def apply_op(name: str, magnitude: Optional[int], img: np.ndarray, rng: SplitMix64) -> np.ndarray:
    if name not in OPS:
        raise PolicyError(f"unknown augmentation op {name!r}")
    m = 0 if magnitude is None else magnitude / MAX_MAGNITUDE
    _, h, w = img.shape
    if name == "Invert":
        out = invert(img)
    elif name == "Equalize":
        out = equalize(img)
    elif name == "Posterize":
        out = posterize(img, 8 - int(round(4 * m)))
    elif name == "Solarize":
        out = solarize(img, 1.0 - m)
    elif name == "Rotate":
        out = rotate(img, _signed(rng, 30.0 * m))
    elif name == "ShearX":
        out = affine_warp(img, np.array([[1.0, _signed(rng, 0.3 * m)], [0.0, 1.0]]))
    elif name == "ShearY":
        out = affine_warp(img, np.array([[1.0, 0.0], [_signed(rng, 0.3 * m), 1.0]]))
    elif name == "TranslateX":
        out = affine_warp(img, np.eye(2), (_signed(rng, 150 / 331 * w * m), 0.0))
    elif name == "TranslateY":
        out = affine_warp(img, np.eye(2), (0.0, _signed(rng, 150 / 331 * h * m)))
    elif name == "Brightness":
        out = brightness(img, 1.0 + _signed(rng, 0.9 * m))
    else:
        out = contrast(img, 1.0 + _signed(rng, 0.9 * m))
    return np.clip(out, 0.0, 1.0)


def parse_policy(doc) -> List[SubPolicy]:
    """Validate a policy document: a list of sub-policies of two [op, p, magnitude(, note)] entries."""
    if not isinstance(doc, list) or not doc:
        raise PolicyError("policy must be a non-empty list of sub-policies")
    policy = []
    for i, sub in enumerate(doc):
        if not isinstance(sub, list) or len(sub) != 2:
            raise PolicyError(f"sub-policy {i} must hold exactly two ops")
        ops = []
        for entry in sub:
            if not isinstance(entry, list) or len(entry) not in (3, 4):
                raise PolicyError(f"sub-policy {i}: op entries are [name, probability, magnitude]")
            name, p, mag = entry[:3]
            if name not in OPS:
                raise PolicyError(f"sub-policy {i}: unknown augmentation op {name!r}")
            if not isinstance(p, (int, float)) or not 0.0 <= p <= 1.0:
                raise PolicyError(f"sub-policy {i}: probability for {name} must be in [0, 1]")
            if name in NO_MAGNITUDE:
                mag = None
            elif not isinstance(mag, int) or not 0 <= mag <= MAX_MAGNITUDE:
                raise PolicyError(f"sub-policy {i}: {name} magnitude must be an integer in [0, 9]")
            ops.append((name, float(p), mag))
        policy.append(tuple(ops))
    return policy


def load_policy(path: Optional[str] = None) -> List[SubPolicy]:
    """Read a policy file; the bundled ImageNet policy when ``path`` is None."""
    if path is None:
        text = resources.files("eoaug.data").joinpath("imagenet_policy.json").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyError(f"policy file is not valid JSON: {exc}") from None
    return parse_policy(doc)


def autoaugment_apply(policy: Sequence[SubPolicy], img: np.ndarray, rng: SplitMix64) -> np.ndarray:
    """Pick one sub-policy uniformly and apply each of its ops with its probability."""
    sub = policy[int(rng.integers(0, len(policy)))]
    out = img
    for name, p, mag in sub:
        if rng.random() < p:
            out = apply_op(name, mag, out, rng)
    return out
