"""Low-rank adapters on frozen dense weights: W' = W + A B^T."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable

import numpy as np

from . import eot
from . import tensor as T
from .errors import ConfigError, DimensionError
from .rng import SplitMix64
from .tensor import ParamSet, Tensor

INIT_STD = 0.01


@dataclass
class LoraAdapter:
    W: Tensor  # n x m, frozen
    A: Tensor  # n x d
    B: Tensor  # m x d

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def trainable_count(self) -> int:
        return self.A.data.size + self.B.data.size

    @property
    def frozen_count(self) -> int:
        return self.W.data.size


def check_rank(n: int, m: int, d: int) -> None:
    if not 1 <= d or 2 * d > min(n, m):
        raise ConfigError(f"LoRA rank {d} out of range [1, {min(n, m) // 2}] for a {n}x{m} weight")


def lora_init(W, d: int, seed: int) -> LoraAdapter:
    """A ~ N(0, 0.01^2), B = 0, so the adapted weight starts equal to ``W``."""
    W = T.as_tensor(W)
    if W.ndim != 2:
        raise DimensionError(f"LoRA base must be a matrix, got {W.shape}")
    n, m = W.shape
    check_rank(n, m, d)
    a = INIT_STD * SplitMix64(seed).normal((n, d))
    return LoraAdapter(Tensor(W.data), Tensor(a, requires_grad=True), Tensor(np.zeros((m, d)), requires_grad=True))


def lora_forward(x, adapter: LoraAdapter) -> Tensor:
    """x W + (x A) B^T without forming A B^T."""
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != adapter.W.shape[0]:
        raise DimensionError(f"lora_forward: input {x.shape} does not match base {adapter.W.shape}")
    base = T.matmul(x, adapter.W)
    return T.add(base, T.matmul(T.matmul(x, adapter.A), T.transpose(adapter.B)))


def lora_merge(adapter: LoraAdapter) -> np.ndarray:
    return adapter.W.data + adapter.A.data @ adapter.B.data.T


# -- adapters living inside a ParamSet ---------------------------------------
#
# Layer ``foo`` keeps its base weight at ``foo.w``; its factors are stored as
# ``lora.foo.A`` / ``lora.foo.B``.

def factor_names(layer: str):
    return f"lora.{layer}.A", f"lora.{layer}.B"


def attach(params: ParamSet, layers: Iterable[str], d: int, seed: int) -> None:
    """Freeze every existing parameter and add trainable factors for ``layers``."""
    params.freeze_all()
    for layer in layers:
        fresh = lora_init(params[f"{layer}.w"], d, SplitMix64.from_keys(seed, "lora", layer).next_u64())
        a_name, b_name = factor_names(layer)
        params.add(a_name, fresh.A.data, trainable=True)
        params.add(b_name, fresh.B.data, trainable=True)


def adapter_of(params: ParamSet, layer: str) -> LoraAdapter:
    a_name, b_name = factor_names(layer)
    return LoraAdapter(params[f"{layer}.w"], params[a_name], params[b_name])


def has_adapter(params: ParamSet, layer: str) -> bool:
    return factor_names(layer)[0] in params


def adapted_layers(params: ParamSet):
    return sorted({n[len("lora."):-len(".A")] for n in params if n.startswith("lora.") and n.endswith(".A")})


def save_adapters(params: ParamSet, path) -> None:
    names = [n for n in params if n.startswith("lora.")]
    eot.save_checkpoint(path, {n: params[n].data for n in names})


def load_adapters(params: ParamSet, path) -> None:
    """Add (frozen) adapter factors read from ``path`` to ``params``."""
    for name, arr in eot.load_checkpoint(path).items():
        if not name.startswith("lora."):
            raise ConfigError(f"unexpected record {name!r} in adapter checkpoint")
        params.add(name, arr, trainable=False)


def merged_weights(params: ParamSet) -> Dict[str, np.ndarray]:
    return {layer: lora_merge(adapter_of(params, layer)) for layer in adapted_layers(params)}
