"""Named parameter tensors, trainability flags and the Adam optimizer."""

from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor, get_dtype


class TrainingError(RuntimeError):
    pass


class ParameterStore:
    """Ordered mapping of parameter name to :class:`Tensor`.

    A tensor's ``requires_grad`` attribute *is* its trainability flag, so
    freezing a model is a matter of data, not of which code path runs.
    """

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = dict(tensors or {})

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.ascontiguousarray(data, dtype=get_dtype()), requires_grad=trainable, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._tensors.items() if t.requires_grad]

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(t.data.size for t in self._tensors.values() if t.requires_grad or not trainable_only)

    def subset(self, prefix: str) -> "ParameterStore":
        return ParameterStore({n: t for n, t in self._tensors.items() if n.startswith(prefix)})

    def merge(self, other: "ParameterStore") -> "ParameterStore":
        clash = set(self._tensors) & set(other._tensors)
        if clash:
            raise KeyError(f"duplicate parameter names: {sorted(clash)[:3]}")
        return ParameterStore({**self._tensors, **other._tensors})

    def freeze(self) -> "ParameterStore":
        for t in self._tensors.values():
            t.requires_grad = False
            t.grad = None
        return self

    def set_trainable(self, patterns: Iterable[str]) -> list[str]:
        """Flag tensors matching any glob pattern trainable, everything else frozen."""
        patterns = list(patterns)
        chosen = []
        for name, t in self._tensors.items():
            t.requires_grad = any(fnmatch.fnmatchcase(name, p) for p in patterns)
            if t.requires_grad:
                chosen.append(name)
            else:
                t.grad = None
        return chosen

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self._tensors):
            missing = sorted(set(self._tensors) - set(state))
            extra = sorted(set(state) - set(self._tensors))
            raise KeyError(f"state mismatch; missing={missing[:3]} unexpected={extra[:3]}")
        for name, value in state.items():
            if name not in self._tensors:
                continue
            t = self._tensors[name]
            if t.data.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match {t.data.shape}")
            t.data[...] = value

    def astype(self, dtype) -> None:
        for t in self._tensors.values():
            t.data = t.data.astype(dtype)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def cosine_lr(base: float, step: int, total: int, floor: float = 0.05) -> float:
    """Half-cosine decay from ``base`` at step 1 to ``floor * base`` at ``total``."""
    if total <= 1:
        return base
    frac = (step - 1) / (total - 1)
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def adam_step(
    store: ParameterStore,
    grads: dict[str, np.ndarray] | None = None,
    lr: float = 3e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    step: int | None = None,
    state: AdamState | None = None,
) -> AdamState:
    """One bias-corrected Adam update of the trainable tensors in ``store``.

    ``grads`` defaults to each tensor's accumulated ``.grad``. Frozen tensors
    are never touched. Returns the (mutated) moment state.
    """
    state = state if state is not None else AdamState()
    step = state.step + 1 if step is None else step
    if step < 1:
        raise ValueError("Adam step count starts at 1")
    names = store.trainable_names()
    if grads is None:
        grads = {n: store[n].grad for n in names}
    missing = [n for n in names if grads.get(n) is None]
    if missing:
        raise TrainingError(f"no gradient for trainable tensor(s): {missing[:5]}")
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for name in names:
        p = store[name]
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    state.step = step
    return state
