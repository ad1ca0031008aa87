"""Central finite-difference gradient checks.

This is the oracle used by the test-suite and ``dualseg selfcheck``; it only
touches ``Tensor.data`` and never the recorded graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """max |a - n| / max(|a|, |n|, floor) over entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                    h: float = 1e-5, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Worst relative error between backprop and finite differences.

    ``max_entries`` limits how many coordinates per tensor are probed
    (chosen at random) to keep large micro-networks affordable.
    """
    for t in tensors:
        t.grad = None
    backward(fn())
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        if max_entries is None or t.data.size <= max_entries:
            worst = max(worst, relative_error(analytic, numerical_grad(fn, t, h)))
            continue
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(t.data.size, size=max_entries, replace=False)
        flat = t.data.reshape(-1)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, relative_error(np.array([analytic.reshape(-1)[i]]), np.array([num])))
    return worst
