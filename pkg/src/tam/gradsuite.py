"""Finite-difference verification of every kernel and loss on random instances.

Each case builds a scalar function of freshly drawn parameters. Outputs are
contracted against a random weight tensor so that no gradient entry is
structurally zero, which would make the relative error meaningless.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L

__all__ = ["CASES", "run_gradient_suite"]


def _projector(rng):
    """Contract with a fixed random tensor, identical across repeated calls."""
    seed = int(rng.integers(2**31))
    return lambda out: ad.sum(out * np.random.default_rng(seed).normal(size=out.shape))


def _shape(rng, lo=2, hi=5, ndim=2):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _params(rng, **shapes) -> ad.ParamSet:
    return ad.ParamSet({k: ad.DiffValue(rng.normal(size=s)) for k, s in shapes.items()})


# each case: rng -> (params, f)

def _binary(op):
    def case(rng):
        s = _shape(rng)
        p = _params(rng, a=s, b=s)
        if op is ad.div:
            p["b"].data[...] = np.sign(p["b"].data) * (0.5 + np.abs(p["b"].data))
        pj = _projector(rng)
        return p, lambda: pj(op(p["a"], p["b"]))
    return case


def _unary(op, positive=False):
    def case(rng):
        p = _params(rng, a=_shape(rng))
        if positive:
            p["a"].data[...] = 0.2 + np.abs(p["a"].data)
        pj = _projector(rng)
        return p, lambda: pj(op(p["a"]))
    return case


def _broadcast_add(rng):
    n, c = _shape(rng)
    p = _params(rng, a=(n, c), b=(c,))
    pj = _projector(rng)
    return p, lambda: pj(p["a"] + p["b"])


def _matmul(rng):
    n, k, m = _shape(rng, ndim=3)
    p = _params(rng, a=(n, k), b=(k, m))
    pj = _projector(rng)
    return p, lambda: pj(ad.matmul(p["a"], p["b"]))


def _reduce(op):
    def case(rng):
        s = _shape(rng, ndim=3)
        axis = int(rng.integers(0, 3))
        p = _params(rng, a=s)
        pj = _projector(rng)
        return p, lambda: pj(op(p["a"], axis=axis))
    return case


def _sum_all(rng):
    p = _params(rng, a=_shape(rng))
    return p, lambda: ad.sum(p["a"] * p["a"])


def _concat(rng):
    n, c1, c2 = _shape(rng, ndim=3)
    p = _params(rng, a=(n, c1), b=(n, c2))
    pj = _projector(rng)
    return p, lambda: pj(ad.concat([p["a"], p["b"]], axis=1))


def _reshape(rng):
    n, c = _shape(rng)
    p = _params(rng, a=(n, c))
    pj = _projector(rng)
    return p, lambda: pj(ad.reshape(ad.transpose(p["a"]), (c * n,)))


def _gather(rng):
    n, c = _shape(rng)
    idx = rng.integers(0, n, size=(int(rng.integers(1, 6)), 3))
    p = _params(rng, a=(n, c))
    pj = _projector(rng)
    return p, lambda: pj(ad.gather(p["a"], idx))


def _neighbor_max(rng):
    n, c = _shape(rng, 3, 6)
    idx = rng.integers(0, n, size=(int(rng.integers(1, 6)), int(rng.integers(1, 4))))
    p = _params(rng, a=(n, c))
    pj = _projector(rng)
    return p, lambda: pj(ad.neighbor_max(p["a"], idx))


def _batch_norm(training):
    def case(rng):
        n, c = _shape(rng, 3, 6)
        p = _params(rng, x=(n, c), gamma=(c,), beta=(c,))
        rm = rng.normal(size=c)
        rv = 0.5 + rng.random(c)
        pj = _projector(rng)

        def f():
            return pj(ad.batch_norm(p["x"], p["gamma"], p["beta"], rm.copy(), rv.copy(), training))
        return p, f
    return case


def _l2(rng):
    p = _params(rng, a=_shape(rng))
    pj = _projector(rng)
    return p, lambda: pj(ad.l2_norm(p["a"], axis=-1))


def _cos(rng):
    s = _shape(rng)
    p = _params(rng, a=s, b=s)
    pj = _projector(rng)
    return p, lambda: pj(ad.cosine_similarity(p["a"], p["b"]))


def _clip(rng):
    p = _params(rng, a=_shape(rng))
    p["a"].data[...] = 0.5 + np.abs(p["a"].data)
    pj = _projector(rng)
    return p, lambda: pj(ad.clip_min(p["a"], 0.1))


# -- losses --------------------------------------------------------------------

def _logit_pair(rng):
    B, C = _shape(rng, 2, 5)
    return B, C, _params(rng, l1=(B, C), l2=(B, C))


def _source_ce(rng):
    B, C, p = _logit_pair(rng)
    y = rng.integers(0, C, size=B)
    return p, lambda: L.source_ce(ad.softmax(p["l1"]), ad.softmax(p["l2"]), y)


def _spst(rng):
    B, C, p = _logit_pair(rng)
    pseudo = np.zeros((B, C))
    rows = np.flatnonzero(rng.random(B) < 0.7)
    if rows.size == 0:
        rows = np.array([0])
    pseudo[rows, rng.integers(0, C, size=rows.size)] = 1
    gamma = -np.log(0.8)
    return p, lambda: L.spst_target_loss(ad.softmax(p["l1"]), ad.softmax(p["l2"]), pseudo, gamma)


def _mix(rng):
    B, C = _shape(rng, 2, 5)
    y = rng.dirichlet(np.ones(C), size=B)
    p = _params(rng, logits=(B, C))
    return p, lambda: L.mix_loss(p["logits"], y)


def _implicit(rng):
    n = int(rng.integers(1, 8))
    p = _params(rng, pred=(n, 4))
    target = rng.normal(size=(n, 4))
    return p, lambda: L.implicit_loss(p["pred"], target)


def _sim(rng):
    B, d = _shape(rng, 2, 6)
    p = _params(rng, z_pcg=(B, d))
    z_g = rng.normal(size=(B, d))  # gradient-stopped by design, so held constant
    return p, lambda: L.sim_loss(p["z_pcg"], z_g)


def _cdc(rng):
    B, d = _shape(rng, 2, 6)
    C = int(rng.integers(2, 4))
    nb = int(rng.integers(C, 10))
    bank = rng.normal(size=(nb, d))
    bank_y = np.concatenate([np.arange(C), rng.integers(0, C, size=nb - C)])
    y = rng.integers(0, C, size=B)
    p = _params(rng, z=(B, d))
    return p, lambda: L.cdc_loss(p["z"], y, bank, bank_y, tau=0.5)[0]


def _total(rng):
    p = _params(rng, a=(6,))
    w = L.LossWeights(*np.abs(rng.normal(size=5)))

    def f():
        a = p["a"]
        terms = {k: ad.sum(a[i : i + 1] * a[i : i + 1]) + a[i] for i, k in
                 enumerate(("source", "target", "cdc", "imp", "mix", "sim"))}
        return L.total_loss(terms, w)
    return p, f


CASES: dict[str, Callable] = {
    "add": _binary(ad.add),
    "add_broadcast": _broadcast_add,
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div),
    "neg": _unary(ad.neg),
    "relu": _unary(ad.relu),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, positive=True),
    "clip_min": _clip,
    "softmax": _unary(ad.softmax),
    "log_softmax": _unary(ad.log_softmax),
    "matmul": _matmul,
    "sum": _reduce(ad.sum),
    "sum_all": _sum_all,
    "mean": _reduce(ad.mean),
    "max": _reduce(ad.max),
    "concat": _concat,
    "reshape_transpose": _reshape,
    "gather": _gather,
    "neighbor_max": _neighbor_max,
    "batch_norm_train": _batch_norm(True),
    "batch_norm_eval": _batch_norm(False),
    "l2_norm": _l2,
    "cosine_similarity": _cos,
    "loss_source_ce": _source_ce,
    "loss_spst_target": _spst,
    "loss_mix": _mix,
    "loss_implicit": _implicit,
    "loss_sim": _sim,
    "loss_cdc": _cdc,
    "loss_total": _total,
}


def run_gradient_suite(instances: int = 20, seed: int = 0, eps: float = 1e-5, names=None) -> dict[str, float]:
    """Worst relative error per case over ``instances`` random draws."""
    out = {}
    for name in names or CASES:
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng([seed, i, sum(map(ord, name))])
            params, f = CASES[name](rng)
            worst = max(worst, ad.grad_check(f, params, eps))
        out[name] = worst
    return out
