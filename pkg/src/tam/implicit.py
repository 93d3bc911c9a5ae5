"""Query points near the sampled surface and their projection targets.

The surface is unknown, so the distance from a query ``c`` is approximated by
the closest point over a fan of triangles built from its ``M`` nearest cloud
points: ``(p1, p2, pm)`` for ``m = 3..M``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import knn_indices

__all__ = [
    "ImplicitConfig",
    "QuerySignal",
    "Part",
    "EmptyBandError",
    "closest_point_on_triangles",
    "approx_dist",
    "approx_dist_batch",
    "voxel_centers",
    "sample_query_points",
    "make_parts",
]


class EmptyBandError(ValueError):
    """No voxel center fell inside the requested distance band."""


@dataclass(frozen=True)
class ImplicitConfig:
    l: int = 12
    d_lower: float = 0.02
    d_upper: float = 0.12
    M: int = 10
    n_query: int = 16
    k_part: int = 64

    def validate(self) -> None:
        if not 0 <= self.d_lower < self.d_upper:
            raise ValueError("distance band needs 0 <= d_lower < d_upper")
        if self.M < 3:
            raise ValueError("M must be >= 3")
        if self.l < 2:
            raise ValueError("voxel resolution l must be >= 2")
        if self.n_query < 1 or self.k_part < 1:
            raise ValueError("n_query and k_part must be positive")


@dataclass
class QuerySignal:
    c: np.ndarray
    t_c: np.ndarray
    n: np.ndarray
    d: float

    @property
    def target(self) -> np.ndarray:
        return np.append(self.n, self.d)


@dataclass
class Part:
    query_index: int
    members: np.ndarray
    coords: np.ndarray


def _dot(u, v):
    return u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1] + u[..., 2] * v[..., 2]


def _closest_on_segments(p, a, b):
    ab = b - a
    denom = _dot(ab, ab)
    t = _dot(p - a, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(np.where(denom > 0, t, 0.0), 0.0, 1.0)
    return a + t[..., None] * ab


def closest_point_on_triangles(p, a, b, c):
    """Closest point of each closed triangle ``(a, b, c)`` to ``p``.

    All arguments broadcast over leading axes with a trailing axis of 3. A
    point whose plane projection falls inside the triangle projects onto the
    face; otherwise the answer lies on an edge. Degenerate triangles use the
    edges only.
    """
    ab, ac = b - a, c - a
    normal = np.cross(ab, ac)
    nn = _dot(normal, normal)
    scale = np.maximum(_dot(ab, ab), _dot(ac, ac))
    flat = nn > 1e-24 * np.maximum(scale, 1e-300) ** 2
    safe = np.where(flat, nn, 1.0)[..., None]
    proj = p - (_dot(p - a, normal)[..., None] / safe) * normal
    # barycentric sign tests against each edge
    ap = proj - a
    u = _dot(np.cross(ap, ac), normal)
    v = _dot(np.cross(ab, ap), normal)
    inside = flat & (u >= 0) & (v >= 0) & (u + v <= nn)
    best = _closest_on_segments(p, a, b)
    best_d = _dot(best - p, best - p)
    for q0, q1 in ((b, c), (c, a)):
        cand = _closest_on_segments(p, q0, q1)
        diff = cand - p
        cd = _dot(diff, diff)
        better = cd < best_d
        best = np.where(better[..., None], cand, best)
        best_d = np.where(better, cd, best_d)
    return np.where(inside[..., None], proj, best)


def approx_dist_batch(queries: np.ndarray, cloud: np.ndarray, M: int):
    """Approximate surface distance and projection point for many queries."""
    cloud = np.asarray(cloud, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if M < 3:
        raise ValueError("M must be >= 3")
    if len(cloud) < M:
        raise ValueError(f"cloud has {len(cloud)} points, need at least M={M}")
    near = cloud[knn_indices(cloud, queries, M)]  # (Q, M, 3)
    a = near[:, :1]
    b = near[:, 1:2]
    c = near[:, 2:]
    t = closest_point_on_triangles(queries[:, None, :], a, b, c)  # (Q, M-2, 3)
    diff = t - queries[:, None, :]
    d2 = _dot(diff, diff)
    best = np.argmin(d2, axis=1)
    rows = np.arange(len(queries))
    return np.sqrt(d2[rows, best]), t[rows, best]


def approx_dist(c, cloud, M: int):
    """Distance from ``c`` to the triangle fan of its ``M`` nearest points, and the foot point."""
    d, t = approx_dist_batch(np.asarray(c, dtype=np.float64)[None], cloud, M)
    return float(d[0]), t[0]


def voxel_centers(cloud: np.ndarray, l: int, pad: float = 0.0) -> np.ndarray:
    """``l**3`` centers of a regular grid over the (padded) bounding box, x-major."""
    lo = cloud.min(axis=0) - pad
    hi = cloud.max(axis=0) + pad
    steps = [(lo[a] + (np.arange(l) + 0.5) * (hi[a] - lo[a]) / l) for a in range(3)]
    gx, gy, gz = np.meshgrid(*steps, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def sample_query_points(cloud, cfg: ImplicitConfig, seed) -> list[QuerySignal]:
    """Voxel centers whose approximate surface distance lies in the band.

    The grid spans the bounding box padded by ``d_upper`` so that flat or thin
    clouds still get off-surface candidates.
    """
    cfg.validate()
    cloud = np.asarray(cloud, dtype=np.float64)
    pad = cfg.d_upper if np.isfinite(cfg.d_upper) else 0.0
    centers = voxel_centers(cloud, cfg.l, pad)
    dist, foot = approx_dist_batch(centers, cloud, cfg.M)
    keep = np.flatnonzero((dist >= cfg.d_lower) & (dist <= cfg.d_upper))
    if keep.size == 0:
        raise EmptyBandError(f"no query in band [{cfg.d_lower}, {cfg.d_upper}]")
    if keep.size > cfg.n_query:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(keep, size=cfg.n_query, replace=False))
    out = []
    for i in keep:
        step = foot[i] - centers[i]
        l1 = np.abs(step).sum()
        n = step / l1 if l1 > 0 else np.zeros(3)
        out.append(QuerySignal(centers[i].copy(), foot[i].copy(), n, float(dist[i])))
    return out


def make_parts(cloud, queries, k_part: int) -> list[Part]:
    """k-nearest-neighbor patch of each query, re-centered on the query point."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if not 1 <= k_part <= len(cloud):
        raise ValueError(f"k_part={k_part} outside [1, {len(cloud)}]")
    pts = np.array([q.c if isinstance(q, QuerySignal) else q for q in queries], dtype=np.float64).reshape(-1, 3)
    idx = knn_indices(cloud, pts, k_part)
    return [Part(i, idx[i], cloud[idx[i]] - pts[i]) for i in range(len(pts))]
