"""Prompt-spec-driven image generation with the (adapted) denoiser."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .. import jsonl
from ..datakit.dataset import LabeledDataset
from ..datakit.imageio import save_image
from ..diffusion import Denoiser, NoiseSchedule, sample_batch
from ..errors import ConfigError, ValidationError
from ..promptgen import PromptSpec
from ..rng import SplitMix64, derive
from ..textcond import embed_text

THREADS_ENV = "EO_AUG_THREADS"


def thread_count(requested: Optional[int] = None) -> int:
    """Worker cap: explicit request, else EO_AUG_THREADS, else the logical core count."""
    if requested is not None:
        n = requested
    else:
        raw = os.environ.get(THREADS_ENV)
        try:
            n = int(raw) if raw else (os.cpu_count() or 1)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    return n


def image_id(class_id: int, index: int, seed: int) -> str:
    return f"gen-{class_id:02d}-{index:05d}-s{seed}"


def generate_augmented_set(denoiser: Denoiser, schedule: NoiseSchedule, spec: PromptSpec,
                           class_names: Sequence[str], guidance_scale: float, seed: int,
                           size: int, count: Optional[int] = None, chunk: int = 50,
                           threads: Optional[int] = None) -> Tuple[LabeledDataset, List[str]]:
    """Exactly ``count`` (default ``spec.per_class_count``) images per class.

    Image i of a class draws from the stream derive(seed, "generate", name, i)
    keyed by the class name and is sampled in a fixed per-class chunk, so
    results depend neither on class order nor on the number of worker threads. Returns the set and the full
    prompt of each image.
    """
    missing = [c for c in class_names if c not in spec.entries]
    if missing:
        raise ValidationError(f"prompt spec is missing classes: {missing}")
    count = spec.per_class_count if count is None else count
    if count < 1 or chunk < 1:
        raise ConfigError("generation count and chunk must be >= 1")
    shape = (denoiser.spec.channels, size, size)
    tasks = [(c, start) for c in range(len(class_names)) for start in range(0, count, chunk)]

    def run(task):
        c, start = task
        stop = min(start + chunk, count)
        cond = embed_text(spec.full_prompt(class_names[c]), denoiser.spec.emb_dim)
        streams = [SplitMix64(derive(seed, "generate", class_names[c], i)) for i in range(start, stop)]
        imgs = sample_batch(denoiser, schedule, np.repeat(cond[None], len(streams), axis=0), streams, shape,
                            guidance_scale)
        return imgs.astype(np.float32).astype(np.float64)

    with ThreadPoolExecutor(max_workers=thread_count(threads)) as pool:
        chunks = list(pool.map(run, tasks))
    ids, labels, prompts = [], [], []
    for c in range(len(class_names)):
        for i in range(count):
            ids.append(image_id(c, i, seed))
            labels.append(c)
            prompts.append(spec.full_prompt(class_names[c]))
    ds = LabeledDataset(ids, np.concatenate(chunks), np.array(labels), tuple(class_names))
    return ds, prompts


def save_generated(ds: LabeledDataset, prompts: Sequence[str], directory) -> Path:
    """EOT1 file per image, then the manifest {"id", "class", "path", "prompt"}."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for image_id_, img, label, prompt in zip(ds.ids, ds.images, ds.labels, prompts):
        rel = f"images/{image_id_}.eot"
        save_image(root / rel, img)
        records.append({"id": image_id_, "class": ds.class_names[int(label)], "path": rel, "prompt": prompt})
    jsonl.write(root / "manifest.jsonl", records)
    return root / "manifest.jsonl"
