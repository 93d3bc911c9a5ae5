"""Non-parametric global encoder built from trigonometric position embeddings.

Each stage downsamples with canonical FPS, groups the ``k`` nearest points,
widens features by concatenating center and neighbor embeddings, reweights
them with an embedding of the normalized offset and pools with max + mean.
There are no trainable weights anywhere in this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import farthest_point_sample_batch, knn_indices

__all__ = ["StageConfig", "PosEncConfig", "pos_encode", "embed", "encode_stage", "encode_global", "encode_global_batch"]


@dataclass(frozen=True)
class StageConfig:
    ratio: float = 0.5
    k: int = 16


def _default_stages():
    return tuple(StageConfig() for _ in range(4))


@dataclass(frozen=True)
class PosEncConfig:
    d0: int = 36
    alpha: float = 100.0
    beta: float = 500.0
    stages: tuple[StageConfig, ...] = field(default_factory=_default_stages)

    def validate(self) -> None:
        if self.d0 <= 0 or self.d0 % 6:
            raise ValueError(f"d0 must be a positive multiple of 6, got {self.d0}")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")
        if len(self.stages) != 4:
            raise ValueError("the global encoder has exactly four stages")
        for s in self.stages:
            if not 0 < s.ratio <= 1 or s.k < 1:
                raise ValueError(f"invalid stage {s}")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.d0 * 2 ** (i + 1) for i in range(len(self.stages)))

    @property
    def out_dim(self) -> int:
        return self.widths[-1]


def embed(points: np.ndarray, width: int, alpha: float, beta: float) -> np.ndarray:
    """Vectorized embedding of ``(..., 3)`` coordinates into ``(..., width)``.

    Per axis, slots ``2m`` and ``2m + 1`` hold sin and cos of
    ``alpha * a / beta**(6m / width)``; the x, y and z blocks are concatenated.
    """
    if width % 6:
        raise ValueError(f"embedding width must be divisible by 6, got {width}")
    freqs = beta ** (6.0 * np.arange(width // 6) / width)
    arg = alpha * points[..., :, None] / freqs  # (..., 3, width/6)
    out = np.empty(points.shape[:-1] + (3, width // 6, 2))
    out[..., 0] = np.sin(arg)
    out[..., 1] = np.cos(arg)
    return out.reshape(points.shape[:-1] + (width,))


def pos_encode(p, cfg: PosEncConfig) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError("pos_encode expects one finite 3D point")
    return embed(p, cfg.d0, cfg.alpha, cfg.beta)


def _stage(points, feats, n_out, k, alpha, beta):
    # points (B, N, 3), feats (B, N, w) -> (B, n_out, 3), (B, n_out, 2w)
    B, N, w = feats.shape
    if k > N:
        raise ValueError(f"neighbor count {k} exceeds {N} available points")
    rows = np.arange(B)[:, None]
    centers = farthest_point_sample_batch(points, n_out)
    cpts = points[rows, centers]
    nbr = knn_indices(points, cpts, k)  # (B, n_out, k)
    offset = points[rows[..., None], nbr] - cpts[:, :, None, :]
    radius = np.sqrt((offset**2).sum(-1)).max(-1)[..., None, None]
    delta = offset / np.where(radius > 0, radius, 1.0)
    pe = embed(delta, 2 * w, alpha, beta)
    fc = np.broadcast_to(feats[rows, centers][:, :, None, :], (B, n_out, k, w))
    fcj = np.concatenate([fc, feats[rows[..., None], nbr]], axis=-1)
    weighted = (fcj + pe) * pe
    return cpts, weighted.max(axis=2) + weighted.mean(axis=2)


def encode_stage(points, features, stage: StageConfig, cfg: PosEncConfig):
    """One stage on a single cloud; returns (center coordinates, center features)."""
    pts = np.asarray(points, dtype=np.float64)
    f = np.asarray(features, dtype=np.float64)
    if (2 * f.shape[-1]) % 6:
        raise ValueError("stage width must be divisible by 6")
    n_out = max(1, int(len(pts) * stage.ratio))
    cp, out = _stage(pts[None], f[None], n_out, stage.k, cfg.alpha, cfg.beta)
    return cp[0], out[0]


def encode_global_batch(clouds, cfg: PosEncConfig | None = None) -> np.ndarray:
    """Global features for equally sized clouds, (B, N, 3) -> (B, 16 * d0)."""
    cfg = cfg or PosEncConfig()
    cfg.validate()
    pts = np.asarray(clouds, dtype=np.float64)
    if pts.ndim != 3 or pts.shape[-1] != 3:
        raise ValueError(f"expected (B, N, 3) clouds, got {pts.shape}")
    n = pts.shape[1]
    for s in cfg.stages:
        if s.k > n or int(n * s.ratio) < 1:
            raise ValueError(f"{pts.shape[1]} points are too few for the stage schedule")
        n = int(n * s.ratio)
    feats = embed(pts, cfg.d0, cfg.alpha, cfg.beta)
    for s in cfg.stages:
        pts, feats = _stage(pts, feats, int(pts.shape[1] * s.ratio), s.k, cfg.alpha, cfg.beta)
    return feats.max(axis=1) + feats.mean(axis=1)


def encode_global(cloud, cfg: PosEncConfig | None = None) -> np.ndarray:
    return encode_global_batch(np.asarray(cloud, dtype=np.float64)[None], cfg)[0]
