"""Compiled inner loops for the two hottest kernels.

Both follow the tie rules of the surrounding numpy code exactly; the test
suite checks them against plain numpy references.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _lex_less(p, i, j):
    for a in range(3):
        if p[i, a] != p[j, a]:
            return p[i, a] < p[j, a]
    return i < j


@njit(cache=True)
def _pick(p, vals):
    best = 0
    for j in range(1, len(vals)):
        if vals[j] > vals[best] or (vals[j] == vals[best] and _lex_less(p, j, best)):
            best = j
    return best


@njit(cache=True)
def fps_kernel(pts, centroids, n):
    """Canonical FPS for (B, N, 3) clouds; ``centroids`` is (B, 3)."""
    B, N = pts.shape[0], pts.shape[1]
    out = np.empty((B, n), dtype=np.int64)
    mind = np.empty(N)
    for b in range(B):
        p = pts[b]
        for j in range(N):
            dx = p[j, 0] - centroids[b, 0]
            dy = p[j, 1] - centroids[b, 1]
            dz = p[j, 2] - centroids[b, 2]
            mind[j] = dx * dx + dy * dy + dz * dz
        cur = _pick(p, mind)
        out[b, 0] = cur
        for j in range(N):
            dx = p[j, 0] - p[cur, 0]
            dy = p[j, 1] - p[cur, 1]
            dz = p[j, 2] - p[cur, 2]
            mind[j] = dx * dx + dy * dy + dz * dz
        for i in range(1, n):
            cur = _pick(p, mind)
            out[b, i] = cur
            for j in range(N):
                dx = p[j, 0] - p[cur, 0]
                dy = p[j, 1] - p[cur, 1]
                dz = p[j, 2] - p[cur, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < mind[j]:
                    mind[j] = d
    return out


@njit(cache=True)
def neighbor_max_fwd(a, idx):
    """Per-channel max over neighbor rows and the row that attains it (first in list order)."""
    m, k = idx.shape
    c = a.shape[1]
    best = np.empty((m, c))
    src = np.empty((m, c), dtype=np.int64)
    for i in range(m):
        r0 = idx[i, 0]
        for ch in range(c):
            best[i, ch] = a[r0, ch]
            src[i, ch] = r0
        for j in range(1, k):
            r = idx[i, j]
            for ch in range(c):
                v = a[r, ch]
                if v > best[i, ch]:
                    best[i, ch] = v
                    src[i, ch] = r
    return best, src


@njit(cache=True)
def scatter_channels(g, src, n):
    """``out[src[i, ch], ch] += g[i, ch]`` in row-major order."""
    out = np.zeros((n, g.shape[1]))
    for i in range(g.shape[0]):
        for ch in range(g.shape[1]):
            out[src[i, ch], ch] += g[i, ch]
    return out


def as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)
