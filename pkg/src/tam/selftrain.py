"""Pretraining and contrastive self-training over prepared source/target sets.

Two phases share one step function. Pretraining minimizes the source CE plus
the self-supervised terms (mixup consistency, implicit-field regression,
part-graph/global similarity). Each self-training epoch then runs that joint
pass followed by a pass over the confidently pseudo-labelled target samples
with the self-paced CE and the contrastive loss against a source feature bank.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .losses import (
    LossWeights,
    cdc_loss,
    implicit_loss,
    mix_loss,
    sim_loss,
    source_ce,
    spst_target_loss,
    total_loss,
)
from .models import ModelBundle
from .posenc import encode_global_batch
from .prepare import PreparedSet

__all__ = [
    "TrainConfig",
    "SelfTrainConfig",
    "PseudoLabelSet",
    "FeatureBank",
    "TrainingDiverged",
    "predict_logits",
    "assign_pseudo_labels",
    "select_from_probs",
    "update_threshold",
    "threshold_schedule",
    "build_feature_bank",
    "pretrain",
    "run_self_training",
]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    min_lr: float = 1e-5
    kappa: float = 2.0
    mix_pairs: int = 8  # mixed clouds per step; each needs a fresh global encoding
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def validate(self) -> TrainConfig:
        if self.epochs < 0 or self.batch_size < 2 or self.mix_pairs < 0:
            raise ValueError("epochs >= 0, batch_size >= 2 and mix_pairs >= 0 required")
        if self.lr <= 0 or self.kappa <= 0:
            raise ValueError("lr and kappa must be positive")
        return self


@dataclass(frozen=True)
class SelfTrainConfig:
    rounds: int = 5
    epochs_per_round: int = 10
    theta0: float = 0.8
    epsilon: float = 0.005
    batch_size: int = 16
    lr: float = 5e-4
    min_lr: float = 1e-5
    tau: float = 0.1
    kappa: float = 2.0
    mix_pairs: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def validate(self) -> SelfTrainConfig:
        if self.rounds < 1 or self.epochs_per_round < 1:
            raise ValueError("rounds and epochs_per_round must be >= 1")
        if not 0 < self.theta0 < 1:
            raise ValueError("theta0 must lie in (0, 1)")
        if self.epsilon < 0 or self.theta0 + self.rounds * self.epsilon >= 1:
            raise ValueError("threshold would reach 1 within the configured rounds")
        if self.batch_size < 2 or self.tau <= 0 or self.lr <= 0:
            raise ValueError("batch_size >= 2, tau > 0 and lr > 0 required")
        return self

    def joint(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs_per_round, batch_size=self.batch_size, lr=self.lr,
                           min_lr=self.min_lr, kappa=self.kappa, mix_pairs=self.mix_pairs,
                           weights=self.weights, seed=self.seed)


@dataclass
class PseudoLabelSet:
    onehot: np.ndarray  # (n, C), rows one-hot or zero
    theta: float

    @property
    def selected(self) -> np.ndarray:
        return self.onehot.sum(axis=1).astype(np.int64)

    @property
    def labels(self) -> np.ndarray:
        """Class per sample, -1 when unselected."""
        return np.where(self.selected == 1, self.onehot.argmax(axis=1), -1)

    @property
    def count(self) -> int:
        return int(self.selected.sum())


@dataclass
class FeatureBank:
    features: np.ndarray  # (n_s, d)
    labels: np.ndarray  # (n_s,)

    def __len__(self) -> int:
        return len(self.labels)


def predict_logits(bundle: ModelBundle, data: PreparedSet, batch: int = 64):
    """Evaluation-mode logits of both heads, ``(logits_reg, logits_pcg)``."""
    was_training = bundle.training
    bundle.eval()
    reg, pcg = [], []
    try:
        for i in range(0, len(data), batch):
            sl = slice(i, i + batch)
            reg.append(bundle.forward_reg(data.global_features[sl]).logits.data)
            pcg.append(bundle.forward_parts(data.parts[sl], data.part_knn[sl])[1].logits.data)
    finally:
        bundle.set_training(was_training)
    return np.concatenate(reg), np.concatenate(pcg)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def select_from_probs(p: np.ndarray, theta: float) -> PseudoLabelSet:
    """One-hot of the arg-max where the top probability exceeds ``theta``."""
    p = np.asarray(p, dtype=np.float64)
    onehot = np.zeros_like(p)
    keep = p.max(axis=1) > theta
    onehot[np.flatnonzero(keep), p[keep].argmax(axis=1)] = 1.0
    return PseudoLabelSet(onehot, float(theta))


def assign_pseudo_labels(bundle: ModelBundle, target: PreparedSet, theta: float) -> PseudoLabelSet:
    reg, pcg = predict_logits(bundle, target)
    return select_from_probs(_softmax((reg + pcg) / 2), theta)


def update_threshold(theta: float, epsilon: float) -> float:
    # rounding keeps repeated increments on the decimal grid (0.815, not 0.8150000000000001)
    out = round(theta + epsilon, 12)
    if out >= 1:
        raise ValueError(f"threshold {out} reached 1")
    return out


def threshold_schedule(theta0: float, epsilon: float, rounds: int) -> list[float]:
    """Thresholds in use before round 1 and after each of ``rounds`` updates."""
    seq = [theta0]
    for _ in range(rounds):
        seq.append(update_threshold(seq[-1], epsilon))
    return seq


def build_feature_bank(bundle: ModelBundle, source: PreparedSet, batch: int = 64) -> FeatureBank:
    was_training = bundle.training
    bundle.eval()
    try:
        z = [bundle.forward_reg(source.global_features[i : i + batch]).z.data for i in range(0, len(source), batch)]
    finally:
        bundle.set_training(was_training)
    return FeatureBank(np.concatenate(z), source.labels.copy())


def _batches(n: int, size: int, rng) -> list[np.ndarray]:
    """Shuffled batches; a trailing batch of one is dropped (batch norm needs two)."""
    perm = rng.permutation(n)
    out = [perm[i : i + size] for i in range(0, n, size)]
    return [b for b in out if len(b) >= 2]


def _check_finite(loss: ad.DiffValue, where: str, terms: dict):
    if not np.isfinite(loss.data):
        detail = {k: float(ad.as_value(v).data) for k, v in terms.items()}
        raise TrainingDiverged(f"non-finite loss during {where}: {detail}")


def _joint_step(bundle, opt, lr, S, T, s_idx, t_idx, cfg: TrainConfig, rng_mix) -> dict:
    """One step on source CE plus mixup, implicit and similarity terms."""
    w = cfg.weights
    use_target = w.mix > 0 or w.imp > 0 or w.sim > 0
    n_s = len(s_idx)
    t_idx = t_idx[: n_s] if use_target else t_idx[:0]
    n_t = len(t_idx)
    fg = S.global_features[s_idx]
    parts, pknn = S.parts[s_idx], S.part_knn[s_idx]
    queries, targets = S.queries[s_idx], S.targets[s_idx]
    if n_t:
        fg = np.concatenate([fg, T.global_features[t_idx]])
        parts = np.concatenate([parts, T.parts[t_idx]])
        pknn = np.concatenate([pknn, T.part_knn[t_idx]])
        queries = np.concatenate([queries, T.queries[t_idx]])
        targets = np.concatenate([targets, T.targets[t_idx]])

    mix = None
    n_mix = min(cfg.mix_pairs, n_s, n_t) if w.mix > 0 else 0
    if n_mix >= 2:
        lam = rng_mix.beta(cfg.kappa, cfg.kappa, size=n_mix)
        # clouds are stored in canonical FPS order, so row i pairs with row i
        mixed = lam[:, None, None] * S.clouds[s_idx[:n_mix]] + (1 - lam[:, None, None]) * T.clouds[t_idx[:n_mix]]
        fg = np.concatenate([fg, encode_global_batch(mixed, bundle.posenc)])
        mix = lam

    reg = bundle.forward_reg(fg)
    zc, pcg = bundle.forward_parts(parts, pknn)
    n_lab = n_s + n_t
    p_reg = ad.softmax(reg.logits)
    p_pcg = ad.softmax(pcg.logits)
    y = S.labels[s_idx]
    terms = {"source": source_ce(p_reg[:n_s], p_pcg[:n_s], y)}
    if w.mix > 0 and mix is not None:
        probs = p_reg.data
        virtual = mix[:, None] * probs[:n_mix] + (1 - mix[:, None]) * probs[n_s : n_s + n_mix]
        terms["mix"] = mix_loss(reg.logits[n_lab:], virtual)
    if w.imp > 0:
        B, Q = queries.shape[:2]
        pred = bundle.decode_implicit(ad.reshape(zc, (B * Q, -1)), queries.reshape(B * Q, 3))
        terms["imp"] = implicit_loss(pred, targets.reshape(B * Q, 4))
    if w.sim > 0:
        terms["sim"] = sim_loss(pcg.z, reg.z[:n_lab])
    loss = total_loss(terms, w)
    _check_finite(loss, "joint step", terms)
    bundle.params.zero_grad()
    loss.backward()
    opt.step(lr=lr)
    out = {k: float(ad.as_value(v).data) for k, v in terms.items()}
    out["total"] = float(loss.data)
    out["correct"] = int((((reg.logits.data[:n_s] + pcg.logits.data[:n_s]) / 2).argmax(1) == y).sum())
    return out


def _target_step(bundle, opt, lr, T, idx, pseudo: PseudoLabelSet, bank: FeatureBank, cfg: SelfTrainConfig):
    w = cfg.weights
    reg = bundle.forward_reg(T.global_features[idx])
    _, pcg = bundle.forward_parts(T.parts[idx], T.part_knn[idx])
    gamma = -math.log(pseudo.theta)
    terms = {"target": spst_target_loss(ad.softmax(reg.logits), ad.softmax(pcg.logits), pseudo.onehot[idx], gamma)}
    skipped = 0
    if w.cdc > 0:
        terms["cdc"], skipped = cdc_loss(reg.z, pseudo.labels[idx], bank.features, bank.labels, cfg.tau)
    loss = total_loss(terms, w)
    _check_finite(loss, "target step", terms)
    bundle.params.zero_grad()
    loss.backward()
    opt.step(lr=lr)
    out = {k: float(ad.as_value(v).data) for k, v in terms.items()}
    out["skipped"] = skipped
    return out


def _mean_rows(rows: list[dict], keys) -> dict:
    return {k: float(np.mean([r[k] for r in rows if k in r])) if any(k in r for r in rows) else 0.0 for k in keys}


_JOINT_KEYS = ("source", "mix", "imp", "sim", "total")


def _joint_epoch(bundle, opt, lr, S, T, cfg: TrainConfig, rng_shuffle, rng_mix) -> dict:
    bundle.train()
    rows, seen = [], 0
    t_perm = rng_shuffle.permutation(len(T))
    for b, s_idx in enumerate(_batches(len(S), cfg.batch_size, rng_shuffle)):
        t_idx = np.resize(np.roll(t_perm, -b * cfg.batch_size), len(s_idx))
        rows.append(_joint_step(bundle, opt, lr, S, T, s_idx, t_idx, cfg, rng_mix))
        seen += len(s_idx)
    out = _mean_rows(rows, _JOINT_KEYS)
    out["train_acc"] = sum(r["correct"] for r in rows) / max(1, seen)
    return out


def pretrain(bundle: ModelBundle, S: PreparedSet, T: PreparedSet, cfg: TrainConfig, on_epoch=None) -> list[dict]:
    """Source-supervised plus self-supervised training; returns per-epoch metrics."""
    cfg.validate()
    opt = ad.Adam(bundle.params)
    rng_shuffle = np.random.default_rng([cfg.seed, 11])
    rng_mix = np.random.default_rng([cfg.seed, 12])
    history = []
    for epoch in range(cfg.epochs):
        lr = ad.cosine_lr(cfg.lr, epoch, cfg.epochs, cfg.min_lr)
        row = {"epoch": epoch + 1, "lr": lr, **_joint_epoch(bundle, opt, lr, S, T, cfg, rng_shuffle, rng_mix)}
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return history


def run_self_training(bundle: ModelBundle, S: PreparedSet, T: PreparedSet, cfg: SelfTrainConfig,
                      on_round=None, evaluate=None) -> list[dict]:
    """Rounds of joint passes plus pseudo-labelled target passes.

    ``evaluate(bundle, data) -> accuracy`` fills the per-round accuracy
    columns; target accuracy uses the hidden labels and never feeds back into
    training. Returns one metrics row per round.
    """
    cfg.validate()
    joint = cfg.joint()
    opt = ad.Adam(bundle.params)
    rng_shuffle = np.random.default_rng([cfg.seed, 21])
    rng_mix = np.random.default_rng([cfg.seed, 22])
    theta = cfg.theta0
    pseudo = assign_pseudo_labels(bundle, T, theta)
    history = []
    for r in range(1, cfg.rounds + 1):
        rows_joint, rows_tgt = [], []
        if pseudo.count == 0:
            log.warning("round %d: no target sample above threshold %.3f, skipping target passes", r, theta)
        for e in range(cfg.epochs_per_round):
            lr = ad.cosine_lr(cfg.lr, e, cfg.epochs_per_round, cfg.min_lr)
            rows_joint.append(_joint_epoch(bundle, opt, lr, S, T, joint, rng_shuffle, rng_mix))
            if pseudo.count == 0:
                continue
            bank = build_feature_bank(bundle, S)
            bundle.train()
            chosen = np.flatnonzero(pseudo.selected)
            perm = rng_shuffle.permutation(chosen)
            for i in range(0, len(perm), cfg.batch_size):
                idx = perm[i : i + cfg.batch_size]
                if len(idx) >= 2:
                    rows_tgt.append(_target_step(bundle, opt, lr, T, idx, pseudo, bank, cfg))
        row = {"round": r, "theta": theta, "selected_count": pseudo.count}
        if evaluate is not None:
            row["source_acc"] = evaluate(bundle, S)
            row["target_acc"] = evaluate(bundle, T)
        row.update({f"loss_{k}": v for k, v in _mean_rows(rows_joint, _JOINT_KEYS).items()})
        row.update({f"loss_{k}": v for k, v in _mean_rows(rows_tgt, ("target", "cdc")).items()})
        row["cdc_skipped"] = int(sum(x.get("skipped", 0) for x in rows_tgt))
        theta = update_threshold(theta, cfg.epsilon)
        pseudo = assign_pseudo_labels(bundle, T, theta)
        row["theta_next"] = theta
        history.append(row)
        if on_round is not None:
            on_round(row)
    return history
