"""Optimizers, learning-rate schedules and the accumulation training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .rng import SplitMix64
from .tensor import ParamSet, Tensor


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 1e-5
    momentum: float = 0.95
    weight_decay: float = 1e-5

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"SGD lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"SGD momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"SGD weight_decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class AdamwConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"AdamW lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"AdamW betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ConfigError(f"AdamW eps must be > 0, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"AdamW weight_decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class Scheduler:
    kind: str = "constant"
    t_max: float = 5.0
    eta_min: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ConfigError(f"unknown scheduler {self.kind!r} (expected 'constant' or 'cosine')")
        if self.kind == "cosine" and not self.t_max > 0:
            raise ConfigError(f"cosine t_max must be > 0, got {self.t_max}")


@dataclass(frozen=True)
class LoopConfig:
    epochs: int = 20
    micro_batch: int = 1
    accumulation_steps: int = 4
    clip_max_norm: Optional[float] = 1.0
    scheduler: Scheduler = field(default_factory=Scheduler)
    early_stop_patience: Optional[int] = None
    min_improvement: float = 1e-6

    def __post_init__(self):
        if self.epochs < 1 or self.micro_batch < 1:
            raise ConfigError("epochs and micro_batch must be >= 1")
        if self.accumulation_steps < 1:
            raise ConfigError(f"accumulation_steps must be >= 1, got {self.accumulation_steps}")
        if self.clip_max_norm is not None and not self.clip_max_norm > 0:
            raise ConfigError(f"clip_max_norm must be > 0, got {self.clip_max_norm}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1 when set")


OptConfig = Union[SgdConfig, AdamwConfig]


def _check_grads(params: ParamSet, grads: Dict[str, np.ndarray]) -> None:
    missing = [n for n in params.trainable_names() if n not in grads]
    if missing:
        raise ContractError(f"missing gradients for trainable parameters: {missing}")


def sgd_step(params: ParamSet, grads: Dict[str, np.ndarray], state: Dict[str, np.ndarray],
             cfg: SgdConfig, lr: Optional[float] = None) -> None:
    """Momentum SGD with coupled weight decay; ``state`` holds the velocities."""
    _check_grads(params, grads)
    lr = cfg.lr if lr is None else lr
    for name in params.trainable_names():
        w = params[name].data
        g = grads[name] + cfg.weight_decay * w if cfg.weight_decay else grads[name]
        v = state.get(name)
        v = g if v is None else cfg.momentum * v + g
        state[name] = v
        params.set(name, w - lr * v)


def adamw_step(params: ParamSet, grads: Dict[str, np.ndarray], state: Dict[str, Any],
               cfg: AdamwConfig, lr: Optional[float] = None) -> None:
    """Adam with bias correction and decoupled weight decay."""
    _check_grads(params, grads)
    lr = cfg.lr if lr is None else lr
    step = state.get("step", 0) + 1
    state["step"] = step
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    c1 = 1.0 - cfg.beta1**step
    c2 = 1.0 - cfg.beta2**step
    for name in params.trainable_names():
        g = grads[name]
        m = cfg.beta1 * m_all.get(name, 0.0) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v_all.get(name, 0.0) + (1.0 - cfg.beta2) * g * g
        m_all[name], v_all[name] = m, v
        w = params[name].data
        if cfg.weight_decay:
            w = w * (1.0 - lr * cfg.weight_decay)
        params.set(name, w - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps))


class Optimizer:
    """Binds an optimizer config to its mutable state."""

    def __init__(self, cfg: OptConfig):
        self.cfg = cfg
        self.state: Dict[str, Any] = {}

    @property
    def lr(self) -> float:
        return self.cfg.lr

    def step(self, params: ParamSet, grads: Dict[str, np.ndarray], lr: Optional[float] = None) -> None:
        if isinstance(self.cfg, SgdConfig):
            sgd_step(params, grads, self.state, self.cfg, lr)
        else:
            adamw_step(params, grads, self.state, self.cfg, lr)


def lr_at(scheduler: Scheduler, t: float, lr0: float) -> float:
    if scheduler.kind == "constant":
        return lr0
    tc = min(t, scheduler.t_max)
    if tc == 0:
        return lr0
    if tc == scheduler.t_max:
        return scheduler.eta_min
    return scheduler.eta_min + (lr0 - scheduler.eta_min) * (1.0 + math.cos(math.pi * tc / scheduler.t_max)) / 2.0


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float = 1.0) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the (possibly) rescaled gradients and the norm before clipping.
    """
    if not max_norm > 0:
        raise ConfigError(f"max_norm must be > 0, got {max_norm}")
    norm = math.sqrt(float(np.sum([np.vdot(g, g) for g in grads.values()])))
    if norm <= max_norm:
        return grads, norm
    # dividing by norm / max_norm keeps (3, 4) -> (0.6, 0.8) exact for max_norm = 1
    shrink = norm / max_norm
    return {n: g / shrink for n, g in grads.items()}, norm


class Batch(NamedTuple):
    indices: np.ndarray
    items: List[Any]
    epoch: int


LossFn = Callable[[ParamSet, Batch], Tensor]


def train_loop(params: ParamSet, data: Sequence, loss_fn: LossFn, optimizer: Optimizer, loop: LoopConfig,
               seed: int, validate: Optional[Callable[[ParamSet], float]] = None, maximize: bool = False,
               restore_best: bool = False, on_epoch: Optional[Callable[[Dict[str, Any]], None]] = None
               ) -> List[Dict[str, Any]]:
    """Shuffled micro-batch training with gradient accumulation.

    Each micro-batch loss must be mean-reduced over its items; accumulated
    gradients are averaged over the micro-batches of one optimizer step so that
    ``accumulation_steps`` micro-batches of size b match one batch of size
    ``accumulation_steps * b``. The final partial group of an epoch still
    triggers a step. The learning rate is looked up once per epoch.

    Early stopping (when ``validate`` and ``loop.early_stop_patience`` are set)
    halts after ``patience`` epochs without an improvement larger than
    ``loop.min_improvement``.
    """
    n = len(data)
    if n == 0:
        raise ContractError("train_loop needs a non-empty dataset")
    history: List[Dict[str, Any]] = []
    best: Optional[float] = None
    best_state: Optional[Dict[str, np.ndarray]] = None
    stale = 0
    for epoch in range(loop.epochs):
        lr = lr_at(loop.scheduler, epoch, optimizer.lr)
        order = SplitMix64.from_keys(seed, "shuffle", epoch).permutation(n)
        acc: Optional[Dict[str, np.ndarray]] = None
        pending = 0
        losses = []
        for start in range(0, n, loop.micro_batch):
            idx = order[start:start + loop.micro_batch]
            loss = loss_fn(params, Batch(idx, [data[i] for i in idx], epoch))
            losses.append(loss.item())
            grads = T.backward(loss, params)
            if acc is None:
                acc = grads
            else:
                for name, g in grads.items():
                    acc[name] = acc[name] + g
            pending += 1
            last = start + loop.micro_batch >= n
            if pending == loop.accumulation_steps or last:
                step_grads = {k: g / pending for k, g in acc.items()} if pending > 1 else acc
                if loop.clip_max_norm is not None:
                    step_grads, _ = clip_grad_norm(step_grads, loop.clip_max_norm)
                optimizer.step(params, step_grads, lr)
                acc, pending = None, 0
        record: Dict[str, Any] = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)),
                                  "val_metric": None, "lr": lr}
        stop = False
        if validate is not None:
            metric = float(validate(params))
            record["val_metric"] = metric
            improved = best is None or (metric > best + loop.min_improvement if maximize
                                        else metric < best - loop.min_improvement)
            if improved:
                best, stale = metric, 0
                if restore_best:
                    best_state = {k: v.copy() for k, v in params.arrays().items()}
            else:
                stale += 1
                stop = loop.early_stop_patience is not None and stale >= loop.early_stop_patience
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if stop:
            break
    if restore_best and best_state is not None:
        for name in params.trainable_names():
            params.set(name, best_state[name])
    return history


def contrastive_loss(img_emb, txt_emb, temperature: float) -> Tensor:
    """Symmetric cross-entropy over the image-text similarity matrix.

    Row i of each side is the positive pair for row i of the other.
    """
    img_emb, txt_emb = T.as_tensor(img_emb), T.as_tensor(txt_emb)
    if img_emb.shape != txt_emb.shape or img_emb.ndim != 2:
        raise ContractError(f"embedding shapes must match: {img_emb.shape} vs {txt_emb.shape}")
    n = img_emb.shape[0]
    if n < 2:
        raise ContractError("contrastive loss needs at least 2 pairs")
    if not temperature > 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    for side, emb in (("image", img_emb), ("text", txt_emb)):
        dev = np.abs(np.linalg.norm(emb.data, axis=1) - 1.0).max()
        if dev > 1e-6:
            raise ContractError(f"{side} embeddings are not L2-normalized (max norm deviation {dev:.3g})")
    logits = T.affine(T.matmul(img_emb, T.transpose(txt_emb)), 1.0 / temperature)
    diag = np.arange(n)
    both = T.add(T.softmax_cross_entropy(logits, diag), T.softmax_cross_entropy(T.transpose(logits), diag))
    return T.affine(both, 0.5)
