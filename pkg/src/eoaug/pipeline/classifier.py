"""Contrastive training of the dual encoder under an augmentation strategy."""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config import ClassifierConfig
from ..datakit import augment as aug
from ..datakit.autoaugment import autoaugment_apply, load_policy
from ..datakit.dataset import LabeledDataset
from ..errors import ContractError, ValidationError
from ..promptgen import PLACEHOLDER
from ..rng import SplitMix64
from ..trainkit import Batch, Optimizer, contrastive_loss, train_loop
from .encoder import DualEncoder, EncoderSpec, TextVocab
from .evaluate import topk_accuracy

Augment = Callable[[np.ndarray, SplitMix64], np.ndarray]


def strategy_transform(strategy: str, out_size: int, policy_path: Optional[str] = None) -> Augment:
    """Per-image transform of a strategy; every variant ends at ``out_size``."""
    if strategy in ("Baseline", "Diffusion"):
        return lambda img, rng: aug.baseline(img, out_size)
    if strategy == "Basic":
        return lambda img, rng: aug.augment_basic(img, out_size, rng)
    if strategy == "Advanced":
        return lambda img, rng: aug.augment_advanced(img, out_size, rng)
    if strategy == "AutoAugment":
        policy = load_policy(policy_path)
        return lambda img, rng: aug.baseline(autoaugment_apply(policy, img, rng), out_size)
    raise ValidationError(f"unknown strategy {strategy!r}")


def training_set(strategy: str, train: LabeledDataset, generated: Optional[LabeledDataset]) -> LabeledDataset:
    """Diffusion adds the generated images to the real split; the others use the real split alone."""
    if strategy == "Diffusion":
        if generated is None:
            raise ContractError("the Diffusion strategy needs a generated image set")
        return train.concat(generated)
    return train


def class_texts(class_names: Sequence[str], template: Optional[str] = None) -> List[str]:
    return [template.replace(PLACEHOLDER, c) if template else c for c in class_names]


def text_vocab(class_names: Sequence[str], template: str) -> TextVocab:
    return TextVocab(list(class_names) + [template.replace(PLACEHOLDER, "")])


def train_classifier(train: LabeledDataset, val: LabeledDataset, strategy: str, cfg: ClassifierConfig, seed: int,
                     generated: Optional[LabeledDataset] = None, val_template: Optional[str] = None,
                     policy_path: Optional[str] = None,
                     on_epoch: Optional[Callable[[Dict], None]] = None) -> Tuple[DualEncoder, List[Dict]]:
    """Train on (image, class name) pairs with the symmetric contrastive loss.

    Early stopping watches validation top-1 and the best weights are kept.
    ``val_template`` switches validation texts from raw class names to the
    templated prompts used by zero-shot evaluation.
    """
    data = training_set(strategy, train, generated)
    if len(data) == 0:
        raise ContractError("training set is empty")
    size = data.images.shape[-1]
    transform = strategy_transform(strategy, size, policy_path)
    names = data.class_names
    encoder = DualEncoder.init(EncoderSpec(data.images.shape[1], tuple(cfg.widths), cfg.embed_dim),
                               text_vocab(names, cfg.zero_shot_template), seed)

    def loss_fn(params, batch: Batch):
        imgs = np.stack([transform(data.images[i], SplitMix64.from_keys(seed, "augment", data.ids[i], batch.epoch))
                         for i in batch.indices])
        texts = [names[int(data.labels[i])] for i in batch.indices]
        return contrastive_loss(encoder.encode_images(imgs), encoder.encode_texts(texts), cfg.temperature)

    val_texts = class_texts(names, val_template)

    def validate(params) -> float:
        return topk_accuracy(encoder.scores(val.images, val_texts), val.labels, 1)

    history = train_loop(encoder.params, list(range(len(data))), loss_fn, Optimizer(cfg.optimizer), cfg.loop,
                         SplitMix64.from_keys(seed, "classifier").next_u64(),
                         validate=validate if len(val) else None, maximize=True, restore_best=True,
                         on_epoch=on_epoch)
    return encoder, history


def evaluate_topk(encoder: DualEncoder, test: LabeledDataset, ks: Sequence[int] = (1, 3)) -> Dict[str, float]:
    scores = encoder.scores(test.images, list(test.class_names))
    return {f"top{k}": topk_accuracy(scores, test.labels, min(k, test.num_classes)) for k in ks}

