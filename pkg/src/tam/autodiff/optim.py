"""Parameter containers, Adam and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DiffValue

__all__ = ["ParamSet", "AdamState", "adam_step", "Adam", "cosine_lr"]


class ParamSet(dict):
    """Named trainable leaves."""

    def __init__(self, items=()):
        super().__init__()
        for name, value in dict(items).items():
            self[name] = value

    def __setitem__(self, name, value):
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not isinstance(value, DiffValue):
            raise TypeError("ParamSet holds DiffValue leaves")
        value.requires_grad = True
        value.name = name
        super().__setitem__(name, value)

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = np.zeros_like(p.data)

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.items()}

    def count(self) -> int:
        return sum(p.size for p in self.values())


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    rejected: int = 0


def adam_step(params: ParamSet, grads: dict, lr: float, state: AdamState,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """One Adam update in place. Returns False (and changes nothing) on non-finite gradients."""
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.rejected += 1
        return False
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


class Adam:
    def __init__(self, params: ParamSet, lr: float = 1e-3):
        self.params = params
        self.lr = lr
        self.state = AdamState()

    def step(self, lr: float | None = None) -> bool:
        return adam_step(self.params, self.params.grads(), self.lr if lr is None else lr, self.state)

    def zero_grad(self) -> None:
        self.params.zero_grad()


def cosine_lr(base_lr: float, epoch: int, total_epochs: int, min_lr: float = 0.0) -> float:
    """Cosine annealing evaluated at the start of ``epoch`` (0-based)."""
    if total_epochs <= 1:
        return base_lr
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * epoch / total_epochs))
