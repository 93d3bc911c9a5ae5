from __future__ import annotations

from typing import Callable

import numpy as np

from .optim import ParamSet
from .tensor import DiffValue

__all__ = ["grad_check", "numeric_grad"]


def numeric_grad(f: Callable[[], DiffValue], params: ParamSet, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of the scalar ``f()`` with respect to every parameter entry."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        out[name] = g
    return out


def grad_check(f: Callable[[], DiffValue], params: ParamSet, eps: float = 1e-5, skip: dict | None = None) -> float:
    """Max elementwise relative error between backward and central differences.

    ``skip`` maps parameter names to boolean masks of entries to leave out,
    e.g. inputs sitting exactly on a max-pool tie.
    """
    params.zero_grad()
    f().backward()
    analytic = {k: v.copy() for k, v in params.grads().items()}
    numeric = numeric_grad(f, params, eps)
    worst = 0.0
    for name in params:
        a, n = analytic[name], numeric[name]
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        if skip and name in skip:
            err = np.where(skip[name], 0.0, err)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
