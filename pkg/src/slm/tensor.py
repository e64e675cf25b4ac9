"""Dense tensors with append-only tape reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` whenever at least one
input requires a gradient. Outside a tape nothing is recorded, which is how
inference and frozen-backbone passes run.

Precision is a process-wide setting: ``f32`` for training, ``f64`` for
gradient checks.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype: type = np.float32
_tapes: list["Tape"] = []


class DimensionError(ValueError):
    pass


def set_precision(name: str) -> None:
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_precision() -> str:
    return "f64" if _dtype is np.float64 else "f32"


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


class Tape:
    """Append-only record of differentiable operations.

    Nodes are stored in execution order, so reversing the list is a valid
    topological order for the backward sweep.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            out.grad = None
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
        self.nodes.clear()


def no_tape_active() -> bool:
    return not _tapes


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_dtype))


def _record(out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if _tapes and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _tapes[-1].nodes.append((out, parents, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        out = Tensor(a.data * c)
        return _record(out, (a,), lambda g: (g * c,))
    a = _as_tensor(a)
    out = Tensor(a.data * b.data)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x2 = x.data * x.data
    t = np.tanh(_GELU_C * x.data * (1.0 + 0.044715 * x2))
    out = Tensor(0.5 * x.data * (1.0 + t))

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _record(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(x.data * mask)
    return _record(out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype))
    return _record(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))
    return _record(out, (x,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    if len({t.shape[:ax] + t.shape[ax + 1:] for t in tensors}) > 1:
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        parts = np.split(g, bounds, axis=ax)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _record(out, tuple(tensors), backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Batched row gather: ``x[b, index[b, j]]`` for x of shape (B, N, ...)."""
    index = np.asarray(index, dtype=np.int64)
    batch = np.arange(x.shape[0])[:, None]
    out = Tensor(x.data[batch, index])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (batch, index), g)
        return (gx,)

    return _record(out, (x,), backward)


def take_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    """Select rows of a 2-D tensor along the first axis."""
    index = np.asarray(index, dtype=np.int64)
    out = Tensor(x.data[index])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(out, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def backward(g):
        if not table.requires_grad:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _record(out, (table,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: width {n} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gb

    return _record(out, (x, gain, bias), backward)


def cross_entropy_next_token(logits: Tensor, targets, pad_id: int) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-pad positions.

    ``logits`` has shape (..., V) and ``targets`` the leading shape (...).
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    keep = targets != pad_id
    live = targets[keep]
    if live.size and (live.min() < 0 or live.max() >= V):
        bad = live[(live < 0) | (live >= V)][0]
        raise IndexError(f"target token {bad} outside vocabulary of size {V}")
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross entropy over an all-padding target")
    flat = logits.data.reshape(-1, V)
    z = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    rows = np.flatnonzero(keep.reshape(-1))
    cols = targets.reshape(-1)[rows]
    loss = -logp[rows, cols].sum() / count
    out = Tensor(np.asarray(loss, dtype=logits.data.dtype))

    def backward(g):
        grad = np.zeros_like(flat)
        p = np.exp(logp[rows])
        p[np.arange(rows.size), cols] -= 1.0
        grad[rows] = p * (g / count)
        return (grad.reshape(logits.shape),)

    return _record(out, (logits,), backward)


def _logsumexp(*xs: np.ndarray) -> np.ndarray:
    m = np.maximum.reduce(xs)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(sum(np.exp(x - safe) for x in xs))


def ctc_loss(logits: Tensor, lengths, targets: Sequence[Sequence[int]], blank: int) -> Tensor:
    """Connectionist temporal classification loss, per target token.

    ``logits`` is (B, T, V) with ``lengths[b]`` valid frames. Each example's
    negative log-likelihood is divided by its target length (at least 1) and
    averaged over the examples whose target fits in the frames at all;
    infeasible examples contribute neither loss nor gradient.
    """
    B, Tn, V = logits.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    if len(targets) != B or lengths.shape != (B,):
        raise DimensionError(f"ctc batch mismatch: logits {logits.shape}, {len(targets)} targets")
    S = 2 * max((len(t) for t in targets), default=0) + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    for b, t in enumerate(targets):
        ext[b, 1:2 * len(t):2] = t
    size = np.array([2 * len(t) + 1 for t in targets])
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    x = logits.data.astype(np.float64)
    z = x - x.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    emit = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (B, Tn, S)), axis=2)
    ninf = np.full((B, S), -np.inf)

    def shift(a, k):
        out = np.full_like(a, -np.inf)
        if k < S:
            out[:, k:] = a[:, :-k]
        return out

    alpha = np.full((B, Tn, S), -np.inf)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, Tn):
        prev = alpha[:, t - 1]
        alpha[:, t] = _logsumexp(prev, shift(prev, 1), np.where(skip, shift(prev, 2), -np.inf)) + emit[:, t]
    rows = np.arange(B)
    last = alpha[rows, lengths - 1]
    ll = _logsumexp(last[rows, size - 1], np.where(size > 1, last[rows, np.maximum(size - 2, 0)], -np.inf))

    beta = np.full((B, Tn, S), -np.inf)
    skip_back = np.zeros((B, S), dtype=bool)
    skip_back[:, :-2] = skip[:, 2:]
    for t in range(Tn - 1, -1, -1):
        if t + 1 < Tn:
            nxt = beta[:, t + 1]
            up1 = np.full_like(nxt, -np.inf)
            up1[:, :-1] = nxt[:, 1:]
            up2 = np.full_like(nxt, -np.inf)
            up2[:, :-2] = nxt[:, 2:]
            beta[:, t] = _logsumexp(nxt, up1, np.where(skip_back, up2, -np.inf)) + emit[:, t]
        start = lengths - 1 == t
        if start.any():
            init = ninf[start].copy()
            idx = np.flatnonzero(start)
            init[np.arange(idx.size), size[idx] - 1] = emit[idx, t, size[idx] - 1]
            two = size[idx] > 1
            init[np.flatnonzero(two), size[idx][two] - 2] = emit[idx[two], t, size[idx][two] - 2]
            beta[idx, t] = init

    feasible = np.isfinite(ll)
    count = int(feasible.sum())
    norm = np.maximum(size // 2, 1)
    loss = float(-(ll[feasible] / norm[feasible]).sum() / count) if count else 0.0
    out = Tensor(np.asarray(loss, dtype=logits.data.dtype))

    def backward(g):
        if not count:
            return (np.zeros_like(logits.data),)
        with np.errstate(invalid="ignore"):
            gamma = np.exp(alpha + beta - emit - ll[:, None, None])
        gamma = np.where(np.isfinite(gamma), gamma, 0.0)
        occupancy = np.zeros((B, Tn, V))
        for s in range(S):
            np.add.at(occupancy, (rows[:, None], np.arange(Tn)[None, :], ext[:, s][:, None]), gamma[:, :, s])
        grad = np.exp(logp) - occupancy
        grad *= (np.arange(Tn)[None, :] < lengths[:, None])[..., None]
        weight = np.where(feasible, g / (norm * count), 0.0)
        return ((grad * weight[:, None, None]).astype(logits.data.dtype),)

    return _record(out, (logits,), backward)


# ---------------------------------------------------------------- helpers


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_dtype), requires_grad=requires_grad)


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal draws rejected and redrawn outside ``±bound·std``."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    return (x * std).astype(_dtype)

