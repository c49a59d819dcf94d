"""Central finite-difference oracle for the analytic backward pass."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, index, eps: float) -> float:
    """(f(x + eps) - f(x - eps)) / (2 eps) for a single entry of ``t``."""
    orig = t.data[index]
    t.data[index] = orig + eps
    up = float(fn().data)
    t.data[index] = orig - eps
    down = float(fn().data)
    t.data[index] = orig
    return (up - down) / (2.0 * eps)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               oracle_dtype=np.float64) -> float:
    """Max relative error between analytic and finite-difference gradients.

    ``fn(*inputs)`` must return a scalar tensor. The analytic gradients come
    from one backward pass in the inputs' own dtype (float32 in practice). The
    oracle then swaps every input's storage for a float64 copy and evaluates
    central differences, so the reference is not limited by float32 rounding.

    For each input the error is ``max |analytic - numeric|`` divided by the
    largest magnitude of either gradient (floored at 1e-12); the function
    returns the maximum over inputs. ``max_entries`` samples that many entries
    per input instead of checking all of them.
    """
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    saved = [t.data for t in inputs]
    for t in inputs:
        t.data = t.data.astype(oracle_dtype)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    try:
        for t, a in zip(inputs, analytic):
            flat_idx = np.arange(t.data.size)
            if max_entries is not None and t.data.size > max_entries:
                flat_idx = rng.choice(t.data.size, size=max_entries, replace=False)
            num = np.empty(len(flat_idx))
            ana = np.empty(len(flat_idx))
            for k, fi in enumerate(flat_idx):
                idx = np.unravel_index(fi, t.data.shape)
                num[k] = numerical_grad(lambda: fn(*inputs), t, idx, eps)
                ana[k] = a[idx]
            scale = max(np.abs(num).max(initial=0.0), np.abs(ana).max(initial=0.0), 1e-12)
            worst = max(worst, float(np.abs(num - ana).max(initial=0.0) / scale))
    finally:
        for t, d in zip(inputs, saved):
            t.data = d
            t.grad = None
    return worst
