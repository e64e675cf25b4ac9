"""Pre-norm transformer blocks on top of :mod:`slm.tensor`.

Every layer registers its tensors in a :class:`ParameterStore` under a dotted
prefix (``text_lm.encoder.layers.0.attn.wq.w`` and so on), which is what the
trainability masks and checkpoint records key on.
"""

from __future__ import annotations

import functools
import math

import numpy as np

from . import tensor as T
from .params import ParameterStore
from .tensor import Tensor, get_dtype

NEG_INF = -1e9


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.w = store.add(f"{name}.w", T.truncated_normal(rng, (d_in, d_out)))
        self.b = store.add(f"{name}.b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, dim: int, eps: float = 1e-5):
        self.gain = store.add(f"{name}.gain", np.ones(dim))
        self.bias = store.add(f"{name}.bias", np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention:
    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int, rng):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(store, f"{name}.wq", dim, dim, rng)
        self.wk = Linear(store, f"{name}.wk", dim, dim, rng)
        self.wv = Linear(store, f"{name}.wv", dim, dim, rng)
        self.wo = Linear(store, f"{name}.wo", dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        return x.reshape(B, L, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray | None) -> Tensor:
        """``mask`` is additive and broadcasts to (B, heads, Lq, Lk)."""
        B, L, D = x.shape
        q = self._split(self.wq(x))
        k = self._split(self.wk(memory))
        v = self._split(self.wv(memory))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            scores = scores + Tensor(mask)
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, L, D)
        return self.wo(out)


class FeedForward:
    def __init__(self, store: ParameterStore, name: str, dim: int, hidden: int, rng):
        self.up = Linear(store, f"{name}.up", dim, hidden, rng)
        self.down = Linear(store, f"{name}.down", hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


class EncoderBlock:
    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int, rng, ff_mult: int = 4):
        self.ln1 = LayerNorm(store, f"{name}.ln1", dim)
        self.attn = MultiHeadAttention(store, f"{name}.attn", dim, heads, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim)
        self.ff = FeedForward(store, f"{name}.ff", dim, ff_mult * dim, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ff(self.ln2(x))


class DecoderBlock:
    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int, rng, ff_mult: int = 4):
        self.ln1 = LayerNorm(store, f"{name}.ln1", dim)
        self.self_attn = MultiHeadAttention(store, f"{name}.self_attn", dim, heads, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim)
        self.cross_attn = MultiHeadAttention(store, f"{name}.cross_attn", dim, heads, rng)
        self.ln3 = LayerNorm(store, f"{name}.ln3", dim)
        self.ff = FeedForward(store, f"{name}.ff", dim, ff_mult * dim, rng)

    def __call__(self, x: Tensor, memory: Tensor, self_mask, memory_mask) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h, self_mask)
        x = x + self.cross_attn(self.ln2(x), memory, memory_mask)
        return x + self.ff(self.ln3(x))


class EncoderStack:
    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int, num_layers: int, rng):
        self.layers = [EncoderBlock(store, f"{name}.layers.{i}", dim, heads, rng) for i in range(num_layers)]
        self.ln_out = LayerNorm(store, f"{name}.ln_out", dim)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask)
        return self.ln_out(x)


class DecoderStack:
    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int, num_layers: int, rng):
        self.layers = [DecoderBlock(store, f"{name}.layers.{i}", dim, heads, rng) for i in range(num_layers)]
        self.ln_out = LayerNorm(store, f"{name}.ln_out", dim)

    def __call__(self, x: Tensor, memory: Tensor, self_mask, memory_mask) -> Tensor:
        for layer in self.layers:
            x = layer(x, memory, self_mask, memory_mask)
        return self.ln_out(x)


@functools.lru_cache(maxsize=64)
def _sinusoid(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    table.setflags(write=False)
    return table


def positions(length: int, dim: int) -> np.ndarray:
    return _sinusoid(length, dim).astype(get_dtype())


def padding_mask(lengths, max_len: int) -> np.ndarray:
    """Additive key mask of shape (B, 1, 1, max_len); 0 where valid."""
    lengths = np.asarray(lengths)
    valid = np.arange(max_len)[None, :] < lengths[:, None]
    return np.where(valid, 0.0, NEG_INF).astype(get_dtype())[:, None, None, :]


def causal_mask(length: int) -> np.ndarray:
    upper = np.triu(np.ones((length, length), dtype=bool), k=1)
    return np.where(upper, NEG_INF, 0.0).astype(get_dtype())[None, None]
