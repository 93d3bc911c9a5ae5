"""Per-cloud precomputation shared by every training and evaluation pass.

Nothing cached here depends on trainable weights: the non-parametric global
feature, the query signals with their parts, the spatial kNN of each part
(first edge-conv layer) and the canonical FPS order used to pair points for
mixup.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import LabeledSample, farthest_point_sample_batch, knn_indices
from .implicit import EmptyBandError, ImplicitConfig, make_parts, sample_query_points
from .posenc import PosEncConfig, encode_global_batch

__all__ = ["PreparedSet", "prepare", "query_signals_for"]


@dataclass
class PreparedSet:
    domain: str
    clouds: np.ndarray  # (n, N, 3), rows permuted into canonical FPS order
    global_features: np.ndarray  # (n, d1)
    queries: np.ndarray  # (n, Q, 3)
    targets: np.ndarray  # (n, Q, 4)
    parts: np.ndarray  # (n, Q, k_part, 3)
    part_knn: np.ndarray  # (n, Q, k_part, edge_k)
    labels: np.ndarray  # (n,), -1 where hidden
    true_labels: np.ndarray  # (n,), evaluation only for the target domain

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> PreparedSet:
        idx = np.asarray(idx)
        return replace(self, **{k: v[idx] for k, v in vars(self).items() if isinstance(v, np.ndarray)})


def query_signals_for(cloud, cfg: ImplicitConfig, seed, max_widen: int = 4):
    """Query signals, doubling the upper band limit when nothing survives."""
    for _ in range(max_widen + 1):
        try:
            return sample_query_points(cloud, cfg, seed), cfg
        except EmptyBandError:
            cfg = replace(cfg, d_upper=2 * cfg.d_upper)
    raise EmptyBandError("no query points even after widening the band")


def _pad_cyclic(items: list, n: int) -> list:
    return [items[i % len(items)] for i in range(n)]


def prepare(samples: list[LabeledSample], posenc: PosEncConfig, implicit: ImplicitConfig,
            edge_k: int = 8, seed: int = 0, batch: int = 32) -> PreparedSet:
    """Precompute everything weight-independent for a list of samples.

    Clouds must share one point count. Clouds with fewer in-band queries than
    ``implicit.n_query`` repeat their survivors cyclically.
    """
    if not samples:
        raise ValueError("cannot prepare an empty dataset")
    clouds = np.stack([s.cloud for s in samples])
    n, N, _ = clouds.shape
    domain = samples[0].domain
    tag = 0 if domain == "source" else 1
    order = np.concatenate([farthest_point_sample_batch(clouds[i : i + batch], N) for i in range(0, n, batch)])
    clouds = np.take_along_axis(clouds, order[..., None], axis=1)
    fg = np.concatenate([encode_global_batch(clouds[i : i + batch], posenc) for i in range(0, n, batch)])
    Q, kp = implicit.n_query, implicit.k_part
    queries = np.empty((n, Q, 3))
    targets = np.empty((n, Q, 4))
    parts = np.empty((n, Q, kp, 3))
    for i in range(n):
        sig, _ = query_signals_for(clouds[i], implicit, [seed, tag, i])
        sig = _pad_cyclic(sig, Q)
        queries[i] = [q.c for q in sig]
        targets[i] = [q.target for q in sig]
        parts[i] = [p.coords for p in make_parts(clouds[i], queries[i], kp)]
    part_knn = knn_indices(parts, parts, edge_k)
    labels = np.array([-1 if s.label is None else s.label for s in samples], dtype=np.int64)
    true = np.array([-1 if s.true_label is None else s.true_label for s in samples], dtype=np.int64)
    return PreparedSet(domain, clouds, fg, queries, targets, parts, part_knn, labels, true)
