"""Training objectives.

All losses take and return :class:`~tam.autodiff.DiffValue` so they can be
combined and differentiated; targets that must not receive gradient are
passed as plain arrays or detached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .geometry import farthest_point_sample

__all__ = [
    "LossWeights",
    "MixPair",
    "PROB_FLOOR",
    "source_ce",
    "spst_target_loss",
    "cdmix",
    "mix_clouds",
    "mix_loss",
    "implicit_loss",
    "sim_loss",
    "cdc_loss",
    "total_loss",
]

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    target: float = 1.0
    cdc: float = 1.0
    imp: float = 1.0
    mix: float = 1.0
    sim: float = 0.1

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")


@dataclass
class MixPair:
    lam: float
    cloud: np.ndarray
    virtual_label: np.ndarray


def _log_prob(p, y):
    p = ad.as_value(p)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    picked = p[np.arange(len(y)), y] if p.ndim == 2 else p[y]
    return ad.log(ad.clip_min(picked, PROB_FLOOR))


def source_ce(p1, p2, y) -> DiffValue:
    """Mean of ``-log(p1[y] * p2[y])`` over the batch: the two heads' CE summed."""
    return -ad.mean(_log_prob(p1, y) + _log_prob(p2, y))


def spst_target_loss(p1, p2, pseudo, gamma: float) -> DiffValue:
    """Self-paced target loss on pseudo-labels.

    ``pseudo`` is (B, C), each row one-hot (selected) or all zero. A selected
    row contributes ``-(log p1[c] + log p2[c] + gamma)``; the sum is divided
    by the number of selected rows.
    """
    pseudo = np.asarray(pseudo, dtype=np.float64)
    h = pseudo.sum(axis=1)
    n_sel = int(h.sum())
    if n_sel == 0:
        return DiffValue(0.0)
    rows = np.flatnonzero(h > 0)
    cls = pseudo[rows].argmax(axis=1)
    lp = _log_prob(ad.as_value(p1)[rows], cls) + _log_prob(ad.as_value(p2)[rows], cls)
    return -(ad.sum(lp) + gamma * n_sel) / n_sel


def mix_clouds(source: np.ndarray, target: np.ndarray, lam: float) -> np.ndarray:
    """Convex combination with points paired by their canonical FPS rank."""
    n = min(len(source), len(target))
    s = source[farthest_point_sample(source, n)]
    t = target[farthest_point_sample(target, n)]
    return lam * s + (1.0 - lam) * t


def cdmix(source, target, pred_source, pred_target, kappa: float, rng, lam: float | None = None) -> MixPair:
    """Cross-domain mixup of one source and one target cloud.

    ``pred_*`` are the current class probabilities of each cloud; they are
    treated as constants. ``lam`` overrides the Beta(kappa, kappa) draw.
    """
    if lam is None:
        lam = float(rng.beta(kappa, kappa))
    ps = np.asarray(pred_source.data if isinstance(pred_source, DiffValue) else pred_source)
    pt = np.asarray(pred_target.data if isinstance(pred_target, DiffValue) else pred_target)
    return MixPair(lam, mix_clouds(np.asarray(source), np.asarray(target), lam), lam * ps + (1 - lam) * pt)


def mix_loss(logits_mixed, virtual_labels) -> DiffValue:
    """``1 - cos(softmax(logits), y_tilde)``, averaged over the batch."""
    p = ad.softmax(logits_mixed)
    y = np.asarray(virtual_labels.data if isinstance(virtual_labels, DiffValue) else virtual_labels)
    return 1.0 - ad.mean(ad.cosine_similarity(p, y))


def implicit_loss(pred, target) -> DiffValue:
    """Mean L2 distance between predicted and target (direction, distance) 4-vectors."""
    pred = ad.as_value(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape[0] == 0:
        raise ValueError("implicit_loss needs at least one query")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    # the norm's kink at zero residual is handled by the clamp in l2_norm
    return ad.mean(ad.l2_norm(pred - target, axis=-1))


def sim_loss(z_pcg, z_g) -> DiffValue:
    """``1 - cos(z_pcg, z_g)`` averaged over the batch; no gradient reaches ``z_g``."""
    return 1.0 - ad.mean(ad.cosine_similarity(z_pcg, ad.stop_gradient(z_g)))


def cdc_loss(z_target, pseudo_labels, bank_features, bank_labels, tau: float = 0.1):
    """Category-based cross-domain contrastive loss against a source feature bank.

    Positives are bank entries sharing the pseudo-label, negatives the rest;
    similarities are ``exp(cos / tau)`` and the ratio is pooled over the batch.
    Returns ``(loss, skipped)``; targets whose class is absent from the bank
    are skipped.
    """
    z = ad.as_value(z_target)
    y = np.asarray(pseudo_labels, dtype=np.int64)
    bank = np.asarray(bank_features, dtype=np.float64)
    bank_y = np.asarray(bank_labels, dtype=np.int64)
    present = np.isin(y, bank_y)
    skipped = int((~present).sum())
    if not present.any():
        return DiffValue(0.0), skipped
    rows = np.flatnonzero(present)
    zt = z[rows] if len(rows) < z.shape[0] else z
    y = y[rows]
    bank_unit = bank / np.maximum(np.linalg.norm(bank, axis=1, keepdims=True), 1e-8)
    zt_unit = zt / ad.l2_norm(zt, axis=-1, keepdims=True, eps=1e-8)
    sims = ad.exp(ad.matmul(zt_unit, bank_unit.T) / tau)  # (n, |B|)
    pos_mask = (y[:, None] == bank_y[None, :]).astype(np.float64)
    pos = ad.sum(sims * pos_mask)
    return -ad.log(pos / ad.sum(sims)), skipped


def total_loss(terms: dict, weights: LossWeights) -> DiffValue:
    """Weighted sum; missing terms count as zero."""
    scale = {"source": 1.0, "target": weights.target, "cdc": weights.cdc, "imp": weights.imp,
             "mix": weights.mix, "sim": weights.sim}
    unknown = set(terms) - set(scale)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    out = DiffValue(0.0)
    for k, v in terms.items():
        if scale[k] != 0.0:
            out = out + scale[k] * ad.as_value(v)
    return out


def threshold_from_gamma(gamma: float) -> float:
    return math.exp(-gamma)
