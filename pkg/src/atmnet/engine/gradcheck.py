"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Array, Tape


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``max|a - n| / max(max|a|, max|n|)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(fn: Callable[[], Array], arr: Array, h: float = 1e-5,
                 indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``arr`` (mutated in place).

    When ``indices`` is given only those coordinates are perturbed and the
    result holds one entry per index, in order.
    """
    flat_idx = list(np.ndindex(arr.shape)) if indices is None else list(indices)
    out = np.empty(len(flat_idx), dtype=np.float64)
    for n, idx in enumerate(flat_idx):
        orig = arr.data[idx]
        arr.data[idx] = orig + h
        fp = float(fn().data)
        arr.data[idx] = orig - h
        fm = float(fn().data)
        arr.data[idx] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out.reshape(arr.shape) if indices is None else out


def check_grad(fn: Callable[[], Array], inputs: Sequence[Array], h: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Largest relative error between tape and finite-difference gradients.

    ``fn`` must build a scalar from ``inputs`` (which need ``requires_grad``).
    With ``max_coords`` at most that many random coordinates per input are
    checked.
    """
    for a in inputs:
        a.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for a in inputs:
        analytic = a.grad if a.grad is not None else np.zeros_like(a.data)
        if max_coords is not None and a.size > max_coords:
            picks = rng.choice(a.size, size=max_coords, replace=False)
            idx = [np.unravel_index(i, a.shape) for i in picks]
            num = numeric_grad(fn, a, h, idx)
            ana = np.array([analytic[i] for i in idx])
        else:
            num = numeric_grad(fn, a, h)
            ana = analytic
        worst = max(worst, rel_error(ana, num))
    return worst
