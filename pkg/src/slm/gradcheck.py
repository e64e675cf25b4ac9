"""Central finite-difference gradient checks (run under 64-bit precision)."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tape, Tensor

# Relative error is |a - n| / max(|a|, |n|, FLOOR). The floor only matters for
# entries whose true gradient is exactly zero (e.g. attention key biases, which
# softmax shift invariance cancels), where a pure ratio is undefined.
FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def analytic_gradients(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    for t in tensors.values():
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    return {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for k, t in tensors.items()}


def numeric_gradient(loss_fn: Callable[[], Tensor], t: Tensor, step: float = 1e-5,
                     entries: Iterable[int] | None = None) -> np.ndarray:
    """Central differences over ``entries`` (flat indices; all by default)."""
    flat = t.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in (range(flat.size) if entries is None else entries):
        old = flat[i]
        flat[i] = old + step
        up = float(loss_fn().data)
        flat[i] = old - step
        down = float(loss_fn().data)
        flat[i] = old
        out[i] = (up - down) / (2 * step)
    return out.reshape(t.shape)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], step: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Max relative error per tensor. ``max_entries`` samples entries per tensor."""
    analytic = analytic_gradients(loss_fn, tensors)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in tensors.items():
        n = t.data.size
        entries = None if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        numeric = numeric_gradient(loss_fn, t, step, entries)
        a = analytic[name].reshape(-1)
        idx = np.arange(n) if entries is None else np.asarray(entries)
        errors[name] = float(relative_error(a[idx], numeric.reshape(-1)[idx]).max())
    return errors
