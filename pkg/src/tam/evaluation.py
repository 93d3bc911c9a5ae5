"""Accuracy reports and the A-distance domain-discrepancy proxy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .models import Linear
from .prepare import PreparedSet
from .selftrain import predict_logits

__all__ = ["EvalReport", "report_from_predictions", "evaluate", "predict", "a_distance", "a_distance_from_error"]


@dataclass
class EvalReport:
    accuracy: float
    per_class: np.ndarray  # NaN for classes with no samples
    confusion: np.ndarray  # rows = truth, columns = prediction

    def to_csv(self) -> str:
        C = len(self.confusion)
        head = "truth," + ",".join(f"pred_{j}" for j in range(C))
        rows = [f"{i}," + ",".join(str(int(v)) for v in self.confusion[i]) for i in range(C)]
        return "\n".join([head, *rows]) + "\n"


def report_from_predictions(truth, pred, n_classes: int) -> EvalReport:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.size == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if truth.shape != pred.shape:
        raise ValueError("truth and prediction lengths differ")
    if truth.min() < 0:
        raise ValueError("evaluation needs ground-truth labels for every sample")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    counts = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, np.diag(conf) / counts, np.nan)
    return EvalReport(float(np.trace(conf) / conf.sum()), per_class, conf)


def predict(bundle, data: PreparedSet) -> np.ndarray:
    """Arg-max of the averaged REG and PCG logits."""
    reg, pcg = predict_logits(bundle, data)
    return ((reg + pcg) / 2).argmax(axis=1)


def evaluate(bundle, data: PreparedSet) -> EvalReport:
    """Report against ``true_labels`` (hidden target labels included)."""
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    return report_from_predictions(data.true_labels, predict(bundle, data), bundle.cfg.n_classes)


def a_distance_from_error(eta: float) -> float:
    """``2 (1 - eta)``; note this is not the classical ``2 (1 - 2 eta)``."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("error rate must lie in [0, 1]")
    return 2.0 * (1.0 - eta)


def a_distance(features_s, features_t, seed: int = 0, hidden: int = 32, steps: int = 200,
               lr: float = 1e-2) -> float:
    """Train a two-layer domain discriminator on 80% of each domain; score the rest."""
    fs = np.asarray(features_s, dtype=np.float64)
    ft = np.asarray(features_t, dtype=np.float64)
    if fs.ndim != 2 or ft.ndim != 2 or fs.shape[1] != ft.shape[1]:
        raise ValueError("features must be (n, d) arrays of equal width")
    if len(fs) < 20 or len(ft) < 20:
        raise ValueError("need at least 20 features per domain")
    rng = np.random.default_rng([seed, 31])
    train, test = [], []
    for label, f in ((0, fs), (1, ft)):
        perm = rng.permutation(len(f))
        cut = int(round(0.8 * len(f)))
        train.append((f[perm[:cut]], np.full(cut, label)))
        test.append((f[perm[cut:]], np.full(len(f) - cut, label)))
    x_tr = np.concatenate([a for a, _ in train])
    y_tr = np.concatenate([b for _, b in train])
    x_te = np.concatenate([a for a, _ in test])
    y_te = np.concatenate([b for _, b in test])
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd

    l1 = Linear(x_tr.shape[1], hidden, rng)
    l2 = Linear(hidden, 2, rng, gain=1.0)
    params = ad.ParamSet([*l1.named_params("l1."), *l2.named_params("l2.")])
    opt = ad.Adam(params, lr=lr)
    rows = np.arange(len(y_tr))
    for _ in range(steps):
        logp = ad.log_softmax(l2(ad.relu(l1(x_tr))))
        loss = -ad.mean(logp[rows, y_tr])
        params.zero_grad()
        loss.backward()
        opt.step()
    pred = l2(ad.relu(l1(x_te))).data.argmax(axis=1)
    return a_distance_from_error(float((pred != y_te).mean()))
