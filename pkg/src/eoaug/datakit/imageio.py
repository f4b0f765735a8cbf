"""EOT1 image files, plain-text PPM/PGM export and dataset manifests."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from .. import eot, jsonl
from ..errors import DimensionError, FormatError, ValidationError
from .dataset import LabeledDataset


def save_image(path, img: np.ndarray) -> None:
    if np.ndim(img) != 3:
        raise DimensionError(f"image must be C x H x W, got shape {np.shape(img)}")
    eot.save_tensor(path, img)


def load_image(path) -> np.ndarray:
    img = eot.load_tensor(path)
    if img.ndim != 3:
        raise FormatError(f"{path}: expected a rank-3 image, found rank {img.ndim}", 4)
    return img


def to_levels(img: np.ndarray) -> np.ndarray:
    """8-bit levels by round-half-up of v * 255."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.int64)


def to_pnm(img: np.ndarray) -> str:
    """Plain PPM (3 channels) or PGM (1 channel) text, maxval 255."""
    c, h, w = img.shape
    if c not in (1, 3):
        raise DimensionError(f"PNM export needs 1 or 3 channels, got {c}")
    levels = to_levels(img).transpose(1, 2, 0).reshape(h, w * c)
    header = f"{'P3' if c == 3 else 'P2'}\n{w} {h}\n255\n"
    return header + "".join(" ".join(map(str, row)) + "\n" for row in levels)


def save_pnm(path, img: np.ndarray) -> None:
    eot.atomic_write(Path(path), to_pnm(img).encode("ascii"))


def save_dataset(ds: LabeledDataset, directory, manifest: str = "manifest.jsonl") -> Path:
    """Write one EOT1 file per image under ``directory`` plus a manifest (written last)."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for image_id, img, label in zip(ds.ids, ds.images, ds.labels):
        rel = f"images/{image_id}.eot"
        save_image(root / rel, img)
        records.append({"id": image_id, "class": ds.class_names[int(label)], "path": rel})
    jsonl.write(root / manifest, records)
    return root / manifest


def load_dataset(manifest_path, class_names: Optional[tuple] = None) -> LabeledDataset:
    path = Path(manifest_path)
    records = jsonl.read(path)
    if class_names is None:
        class_names = tuple(dict.fromkeys(r["class"] for r in records))
    index = {c: i for i, c in enumerate(class_names)}
    unknown = sorted({r["class"] for r in records} - set(index))
    if unknown:
        raise ValidationError(f"{path}: classes {unknown} not in the class table")
    images = [load_image(path.parent / r["path"]) for r in records]
    shape = images[0].shape if images else (3, 1, 1)
    return LabeledDataset([r["id"] for r in records],
                          np.stack(images) if images else np.zeros((0, *shape)),
                          np.array([index[r["class"]] for r in records], dtype=np.int64), class_names)
