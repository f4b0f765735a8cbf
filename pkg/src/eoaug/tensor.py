"""Dense float64 tensors with reverse-mode differentiation.

Only the handful of ops the denoiser, the encoders and the losses need are
provided. Every op builds a graph node only when one of its inputs requires a
gradient, so frozen sub-networks (the LoRA base weights, the denoiser encoder
during fine-tuning) cost a plain numpy forward pass.

Tensors are treated as immutable: optimizers swap new tensors into a
:class:`ParamSet` instead of writing into existing arrays.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import eot
from .errors import ContractError, DimensionError

Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: Tuple["Tensor", ...] = (),
                 _backward: Optional[Backward] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Tuple[Tensor, ...], backward: Backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _need(*ts: Tensor) -> Tuple[bool, ...]:
    return tuple(t.requires_grad for t in ts)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        na, nb = _need(a, b)
        return (g @ bd.T if na else None, ad.T @ g if nb else None)

    return _node(ad @ bd, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def _im2col(x: np.ndarray) -> np.ndarray:
    """N x C x H x W -> N x (C*9) x (H*W) patch matrix for 3x3 windows with zero padding 1."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n, c, h, w, 3, 3
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * 9, h * w)


def conv2d(x, k) -> Tensor:
    """3x3 cross-correlation, zero padding 1, stride 1.

    ``x`` is C x H x W or N x C x H x W, ``k`` is F x C x 3 x 3.
    """
    x, k = as_tensor(x), as_tensor(k)
    if k.ndim != 4 or k.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: kernel must be F x C x 3 x 3, got {k.shape}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input must be C x H x W or N x C x H x W, got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    f = k.shape[0]
    if k.shape[1] != c:
        raise DimensionError(f"conv2d: input has {c} channels but kernel {k.shape} expects {k.shape[1]}")
    cols = _im2col(xd)
    kmat = k.data.reshape(f, c * 9)
    out = np.matmul(kmat, cols).reshape(n, f, h, w)
    out = out if batched else out[0]

    def backward(g):
        nx, nk = _need(x, k)
        g3 = (g if batched else g[None]).reshape(n, f, h * w)
        dk = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(k.shape) if nk else None
        dx = None
        if nx:
            dcols = np.matmul(kmat.T, g3).reshape(n, c, 3, 3, h, w)
            dxp = np.zeros((n, c, h + 2, w + 2))
            for dy in range(3):
                for dxo in range(3):
                    dxp[:, :, dy:dy + h, dxo:dxo + w] += dcols[:, :, dy, dxo]
            dx = dxp[:, :, 1:-1, 1:-1]
            dx = dx if batched else dx[0]
        return dx, dk

    return _node(out, (x, k), backward)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    return add(a, affine(b, -1.0))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def affine(x, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` for scalar ``scale`` and ``shift``."""
    x = as_tensor(x)
    return _node(scale * x.data + shift, (x,), lambda g: (scale * g,))


def add_bias(x, b) -> Tensor:
    """Row bias: ``x`` is n x m, ``b`` has m entries."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def add_channel(x, v) -> Tensor:
    """Add a per-channel (C,) or per-sample-per-channel (N, C) vector to N x C x H x W."""
    x, v = as_tensor(x), as_tensor(v)
    if x.ndim != 4 or v.shape not in ((x.shape[1],), x.shape[:2]):
        raise DimensionError(f"add_channel: cannot add {v.shape} to {x.shape}")
    per_sample = v.ndim == 2
    vd = v.data[:, :, None, None] if per_sample else v.data[None, :, None, None]

    def backward(g):
        gv = g.sum(axis=(2, 3))
        return g, (gv if per_sample else gv.sum(axis=0))

    return _node(x.data + vd, (x, v), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def group_norm(x, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel group) to zero mean, unit variance. No affine."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] % groups:
        raise DimensionError(f"group_norm: {x.shape} channels not divisible into {groups} groups")
    n = x.shape[0]
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=2, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gg = g.reshape(n, groups, -1)
        dx = inv * (gg - gg.mean(axis=2, keepdims=True) - xhat * (gg * xhat).mean(axis=2, keepdims=True))
        return (dx.reshape(x.shape),)

    return _node(xhat.reshape(x.shape), (x,), backward)


def _axes(x: Tensor, axes) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(x.ndim))
    return tuple(a % x.ndim for a in ((axes,) if isinstance(axes, int) else axes))


def sum(x, axes=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    ax = _axes(x, axes)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _node(x.data.sum(axis=ax), (x,), backward)


def mean(x, axes=None) -> Tensor:
    x = as_tensor(x)
    ax = _axes(x, axes)
    count = int(np.prod([x.shape[a] for a in ax], dtype=np.int64))
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / count, shape).copy(),)

    return _node(x.data.mean(axis=ax), (x,), backward)


def avg_pool2(x) -> Tensor:
    """2x2 windowed mean over the spatial axes of N x C x H x W (H, W even)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial extents, got {x.shape}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _node(out, (x,), backward)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of N x C x H x W."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), backward)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale each row of an n x e matrix to unit L2 norm."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize expects n x e, got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True)) + eps
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return _node(y, (x,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects n x k logits, got {logits.shape}")
    n, k = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape != (n,):
        raise ContractError(f"expected {n} targets, got {t.shape[0]}")
    if n and (t.min() < 0 or t.max() >= k):
        raise ContractError(f"target out of range [0, {k}): {t.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, t]).mean()

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return (p * (g / n),)

    return _node(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def _topo(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``."""
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones(())
        for node in reversed(_topo(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    return [grads.get(id(t), np.zeros(t.shape)) for t in wrt]


class ParamSet:
    """Named parameters, each trainable or frozen.

    Trainable tensors carry ``requires_grad=True``; frozen ones do not, so no
    graph is recorded through them.
    """

    def __init__(self, arrays: Optional[Dict[str, np.ndarray]] = None, trainable: bool = True):
        self._tensors: Dict[str, Tensor] = {}
        self._trainable: Dict[str, bool] = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr, trainable)

    def add(self, name: str, array, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._trainable[name] = trainable
        self._tensors[name] = Tensor(np.array(array, dtype=np.float64), requires_grad=trainable)
        return self._tensors[name]

    def set(self, name: str, array) -> None:
        if name not in self._tensors:
            raise KeyError(name)
        self._tensors[name] = Tensor(array, requires_grad=self._trainable[name])

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> List[str]:
        return [n for n, t in self._trainable.items() if t]

    def frozen_names(self) -> List[str]:
        return [n for n, t in self._trainable.items() if not t]

    def set_trainable(self, names: Iterable[str], trainable: bool) -> None:
        for name in names:
            self._trainable[name] = trainable
            self._tensors[name] = Tensor(self._tensors[name].data, requires_grad=trainable)

    def freeze_all(self) -> None:
        self.set_trainable(self.names(), False)

    def count(self, trainable: Optional[bool] = None) -> int:
        return int(sum_sizes(self._tensors[n] for n in self._tensors
                             if trainable is None or self._trainable[n] == trainable))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {n: t.data for n, t in self._tensors.items()}

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for n, t in self._tensors.items():
            out.add(n, t.data.copy(), self._trainable[n])
        return out

    def save(self, path, names: Optional[Iterable[str]] = None) -> None:
        names = self.names() if names is None else list(names)
        eot.save_checkpoint(path, {n: self._tensors[n].data for n in names})

    @classmethod
    def load(cls, path, trainable: bool = False) -> "ParamSet":
        return cls(eot.load_checkpoint(path), trainable=trainable)


def sum_sizes(tensors: Iterable[Tensor]) -> int:
    return int(np.sum([t.data.size for t in tensors], dtype=np.int64))


def backward(loss: Tensor, params: ParamSet) -> Dict[str, np.ndarray]:
    """Gradient of ``loss`` for every trainable parameter; frozen ones are omitted."""
    names = params.trainable_names()
    grads = grad(loss, [params[n] for n in names])
    return dict(zip(names, grads))
