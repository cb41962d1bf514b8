"""Central finite-difference oracle for the differentiation record."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, backward, no_grad


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-6, coords=None,
                 order: int = 2) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. ``t``; only at flat ``coords`` if given (zeros elsewhere).

    ``order=4`` uses the five-point stencil, which tolerates a larger ``h`` and so
    resolves gradients many orders of magnitude below the loss value.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gf = g.reshape(-1)
    with no_grad():
        for i in (range(flat.size) if coords is None else coords):
            old = flat[i]

            def at(x):
                flat[i] = x
                return float(fn().data)
            if order == 2:
                gf[i] = (at(old + h) - at(old - h)) / (2.0 * h)
            else:
                gf[i] = (8.0 * (at(old + h) - at(old - h)) - (at(old + 2 * h) - at(old - 2 * h))) / (12.0 * h)
            flat[i] = old
    return g


def gradcheck(fn: Callable[[], Tensor], tensors: Iterable[Tensor], h: float = 1e-6,
              max_coords: int | None = None, rng=None, order: int = 2) -> float:
    """Max over tensors of ||analytic - numeric|| / (||analytic|| + ||numeric||).

    ``fn`` must rebuild the scalar loss from the current tensor values. With
    ``max_coords`` the comparison runs on that many randomly drawn entries
    per tensor, which keeps large models affordable.
    """
    tensors = list(tensors)
    rng = np.random.default_rng(rng)
    for t in tensors:
        t.grad = np.zeros_like(t.data)
    backward(fn())
    worst = 0.0
    for t in tensors:
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            coords = np.sort(rng.choice(t.data.size, size=max_coords, replace=False))
        a = t.grad.reshape(-1).copy()
        n = numeric_grad(fn, t, h, coords, order).reshape(-1)
        if coords is not None:
            a, n = a[coords], n[coords]
        denom = np.linalg.norm(a) + np.linalg.norm(n)
        if denom < 1e-10:
            continue
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst
