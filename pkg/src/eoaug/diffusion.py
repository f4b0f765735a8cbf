"""Gaussian diffusion on unit-interval images with a conditional conv denoiser.

The forward chain corrupts ``x`` with ``q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I)``;
its t-step composition is ``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps``.
The denoiser predicts ``eps`` and the reverse chain uses ``sigma_t^2 = beta_t``.
Steps are 1-based throughout (t = 1..T).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from . import eot
from . import lora
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .rng import SplitMix64
from .tensor import ParamSet, Tensor
from .trainkit import Batch


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigError("schedule needs at least one step")
        if not (np.all(beta > 0) and np.all(beta < 1)):
            raise ConfigError("every beta must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", 1.0 - beta)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - beta))

    @property
    def T(self) -> int:
        return self.beta.size

    def check_step(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ContractError(f"step {t} outside [1, {self.T}]")
        return t - 1


def linear_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def forward_step(x_prev: np.ndarray, t: int, schedule: NoiseSchedule, noise: np.ndarray) -> np.ndarray:
    i = schedule.check_step(t)
    _check_noise(x_prev, noise)
    b = schedule.beta[i]
    return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * noise


def forward_marginal(x0: np.ndarray, t: int, schedule: NoiseSchedule, noise: np.ndarray) -> np.ndarray:
    i = schedule.check_step(t)
    _check_noise(x0, noise)
    ab = schedule.alpha_bar[i]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def _check_noise(x, noise) -> None:
    if np.shape(x) != np.shape(noise):
        raise DimensionError(f"noise shape {np.shape(noise)} differs from image shape {np.shape(x)}")


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding, sin half then cos half."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserSpec:
    channels: int = 3
    widths: Tuple[int, int, int] = (16, 32, 16)
    emb_dim: int = 32
    groups: int = 8


LORA_LAYERS = ("time.proj", "cond.proj")


def _he(rng: SplitMix64, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return gain * math.sqrt(2.0 / fan_in) * rng.normal(shape)


class Denoiser:
    """Encoder-bottleneck-decoder with one skip connection.

    enc (w0, full res) -> 2x2 pool -> mid (w1, half res, + time/cond embedding)
    -> dec (w2, half res) -> upsample -> + enc skip -> 3x3 head to image channels.
    The time and condition projections into the bottleneck are the dense layers
    that take LoRA adapters.
    """

    def __init__(self, params: ParamSet, spec: DenoiserSpec):
        self.params = params
        self.spec = spec

    @classmethod
    def init(cls, spec: DenoiserSpec, seed: int) -> "Denoiser":
        c, (w0, w1, w2), e = spec.channels, spec.widths, spec.emb_dim
        if w2 != w0:
            raise ConfigError("skip connection needs widths[2] == widths[0]")
        if w1 % spec.groups:
            raise ConfigError(f"bottleneck width {w1} not divisible by {spec.groups} groups")
        rng = SplitMix64.from_keys(seed, "denoiser-init")
        p = ParamSet()
        p.add("enc.k", _he(rng, (w0, c, 3, 3), c * 9))
        p.add("enc.b", np.zeros(w0))
        p.add("mid.k", _he(rng, (w1, w0, 3, 3), w0 * 9))
        p.add("mid.b", np.zeros(w1))
        p.add("dec.k", _he(rng, (w2, w1, 3, 3), w1 * 9))
        p.add("dec.b", np.zeros(w2))
        p.add("head.k", _he(rng, (c, w2, 3, 3), w2 * 9, gain=0.1))
        p.add("head.b", np.zeros(c))
        p.add("time.fc.w", rng.normal((e, e)) / math.sqrt(e))
        p.add("time.fc.b", np.zeros(e))
        p.add("time.proj.w", rng.normal((e, w1)) / math.sqrt(e))
        p.add("time.proj.b", np.zeros(w1))
        p.add("cond.proj.w", rng.normal((e, w1)) / math.sqrt(e))
        p.add("cond.proj.b", np.zeros(w1))
        return cls(p, spec)

    def _dense(self, x: Tensor, layer: str) -> Tensor:
        p = self.params
        y = lora.lora_forward(x, lora.adapter_of(p, layer)) if lora.has_adapter(p, layer) \
            else T.matmul(x, p[f"{layer}.w"])
        return T.add_bias(y, p[f"{layer}.b"])

    def embedding(self, t: np.ndarray, cond: np.ndarray) -> Tensor:
        p = self.params
        temb = Tensor(timestep_embedding(t, self.spec.emb_dim))
        h = T.relu(T.add_bias(T.matmul(temb, p["time.fc.w"]), p["time.fc.b"]))
        return T.add(self._dense(h, "time.proj"), self._dense(Tensor(cond), "cond.proj"))

    def __call__(self, x, t, cond) -> Tensor:
        """Predict noise for a batch ``x`` (N x C x H x W) at steps ``t`` with conditions ``cond`` (N x E)."""
        p = self.params
        x = T.as_tensor(x)
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        cond = np.asarray(cond, dtype=np.float64).reshape(n, self.spec.emb_dim)
        h1 = T.relu(T.add_channel(T.conv2d(x, p["enc.k"]), p["enc.b"]))
        h2 = T.add_channel(T.conv2d(T.avg_pool2(h1), p["mid.k"]), p["mid.b"])
        h2 = T.relu(T.add_channel(T.group_norm(h2, self.spec.groups), self.embedding(t, cond)))
        h3 = T.relu(T.add_channel(T.conv2d(h2, p["dec.k"]), p["dec.b"]))
        h4 = T.add(T.upsample2(h3), h1)
        return T.add_channel(T.conv2d(h4, p["head.k"]), p["head.b"])

    def null_condition(self, n: int) -> np.ndarray:
        return np.zeros((n, self.spec.emb_dim))


def save_denoiser(path, denoiser: Denoiser, schedule: NoiseSchedule, include_lora: bool = False) -> None:
    s = denoiser.spec
    records = {n: denoiser.params[n].data for n in denoiser.params
               if include_lora or not n.startswith("lora.")}
    records["meta.arch"] = np.array([s.channels, *s.widths, s.emb_dim, s.groups], dtype=np.float64)
    records["schedule.beta"] = schedule.beta
    eot.save_checkpoint(path, records)


def load_denoiser(path) -> Tuple[Denoiser, NoiseSchedule]:
    records = eot.load_checkpoint(path)
    try:
        arch = [int(v) for v in records.pop("meta.arch")]
        beta = records.pop("schedule.beta")
    except KeyError as exc:
        raise ConfigError(f"{path}: not a denoiser checkpoint (missing {exc})") from None
    spec = DenoiserSpec(arch[0], (arch[1], arch[2], arch[3]), arch[4], arch[5])
    return Denoiser(ParamSet(records, trainable=False), spec), NoiseSchedule(beta)


# ---------------------------------------------------------------------------
# loss and sampling
# ---------------------------------------------------------------------------

NoisePredictor = Callable[[np.ndarray, np.ndarray, np.ndarray], Tensor]


def ddpm_loss(denoiser: NoisePredictor, x0: np.ndarray, cond: np.ndarray, t, noise: np.ndarray,
              schedule: NoiseSchedule) -> Tensor:
    """Mean squared error between ``noise`` and the prediction at the noised input.

    ``x0``/``noise`` are N x C x H x W with per-item steps ``t`` (N,) and conditions (N x E).
    """
    _check_noise(x0, noise)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x0.shape[0],))
    if t.min() < 1 or t.max() > schedule.T:
        raise ContractError(f"steps must lie in [1, {schedule.T}]")
    ab = schedule.alpha_bar[t - 1].reshape(-1, 1, 1, 1)
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    diff = T.sub(denoiser(xt, t, cond), Tensor(noise))
    return T.mean(T.mul(diff, diff))


def reverse_update(x_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule: NoiseSchedule,
                   z: np.ndarray) -> np.ndarray:
    """One ancestral step given a noise prediction; ``z`` is ignored at t = 1."""
    i = schedule.check_step(t)
    b, a, ab = schedule.beta[i], schedule.alpha[i], schedule.alpha_bar[i]
    mean = (x_t - (b / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    if t == 1:
        return mean
    return mean + math.sqrt(b) * z


def reverse_step(denoiser: NoisePredictor, x_t: np.ndarray, t: int, cond: np.ndarray,
                 schedule: NoiseSchedule, z: np.ndarray) -> np.ndarray:
    schedule.check_step(t)
    n = x_t.shape[0]
    eps = denoiser(x_t, np.full(n, t), cond).data
    return reverse_update(x_t, eps, t, schedule, z)


def guided_eps(eps_cond: Optional[np.ndarray], eps_null: Optional[np.ndarray], scale: float) -> np.ndarray:
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_null
    return eps_null + scale * (eps_cond - eps_null)


@dataclass(frozen=True)
class SampleConfig:
    guidance_scale: float = 1.0
    seed: int = 0
    steps: Optional[int] = None

    def __post_init__(self):
        if not self.guidance_scale >= 0:
            raise ConfigError(f"guidance_scale must be >= 0, got {self.guidance_scale}")


def sample_batch(denoiser: Denoiser, schedule: NoiseSchedule, cond: np.ndarray, streams: Sequence[SplitMix64],
                 shape: Tuple[int, int, int], guidance_scale: float = 1.0,
                 steps: Optional[int] = None) -> np.ndarray:
    """Run the guided reverse chain for one image per stream.

    Image i draws x_T and every z_t from ``streams[i]`` only, so its result does
    not depend on which other images share the batch.
    """
    n = len(streams)
    start = schedule.T if steps is None else steps
    schedule.check_step(start)
    cond = np.asarray(cond, dtype=np.float64).reshape(n, -1)
    null = denoiser.null_condition(n)
    x = np.stack([s.normal(shape) for s in streams])
    for t in range(start, 0, -1):
        ts = np.full(n, t)
        if guidance_scale == 1.0:
            eps = denoiser(x, ts, cond).data
        elif guidance_scale == 0.0:
            eps = denoiser(x, ts, null).data
        else:
            both = denoiser(np.concatenate([x, x]), np.full(2 * n, t), np.concatenate([cond, null])).data
            eps = guided_eps(both[:n], both[n:], guidance_scale)
        z = np.stack([s.normal(shape) for s in streams]) if t > 1 else np.zeros_like(x)
        x = reverse_update(x, eps, t, schedule, z)
    return np.clip(x, 0.0, 1.0)


def sample(denoiser: Denoiser, schedule: NoiseSchedule, cond: np.ndarray, cfg: SampleConfig,
           shape: Tuple[int, int, int]) -> np.ndarray:
    """Draw one image conditioned on ``cond`` (E,), seeded by ``cfg.seed``."""
    out = sample_batch(denoiser, schedule, np.asarray(cond)[None], [SplitMix64(cfg.seed)], shape,
                       cfg.guidance_scale, cfg.steps)
    return out[0]


# ---------------------------------------------------------------------------
# training glue
# ---------------------------------------------------------------------------

def ddpm_loss_fn(denoiser: Denoiser, schedule: NoiseSchedule, seed: int, cond_dropout: float = 0.1):
    """Build a ``train_loop`` loss over items ``(image, cond)``.

    Step, noise and condition dropout are drawn per item from a stream keyed by
    (seed, epoch, item index), so batching does not change the draws.
    """

    def loss_fn(params: ParamSet, batch: Batch) -> Tensor:
        xs, conds, ts, noises = [], [], [], []
        for idx, (img, cond) in zip(batch.indices, batch.items):
            rng = SplitMix64.from_keys(seed, "ddpm", batch.epoch, int(idx))
            ts.append(rng.randint(1, schedule.T))
            drop = rng.random() < cond_dropout
            noises.append(rng.normal(img.shape))
            xs.append(img)
            conds.append(np.zeros_like(cond) if drop else cond)
        return ddpm_loss(denoiser, np.stack(xs), np.stack(conds), np.array(ts), np.stack(noises), schedule)

    return loss_fn
