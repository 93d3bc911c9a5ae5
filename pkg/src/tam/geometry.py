"""Point-cloud kernels, the synthetic Sim2Real generator and the ``.tamp`` file format.

Clouds are plain ``(N, 3)`` float64 arrays. Every selection routine here breaks
ties deterministically so that downstream encoders are invariant to the input
point order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._kernels import fps_kernel

__all__ = [
    "DegenerateInputError",
    "CloudFormatError",
    "LabeledSample",
    "SynthConfig",
    "SHAPE_FAMILIES",
    "normalize_unit",
    "farthest_point_sample",
    "farthest_point_sample_batch",
    "knn",
    "knn_indices",
    "k_smallest",
    "sample_shape",
    "crop_halfspace",
    "generate_domain",
    "generate_domain_pair",
    "read_cloud",
    "write_cloud",
    "write_dataset",
    "read_dataset",
]

MAGIC = b"TAMP"
VERSION = 1
_HEADER = struct.Struct("<4sHIH")


class DegenerateInputError(ValueError):
    """Raised when a cloud has no spatial extent."""


class CloudFormatError(ValueError):
    """Raised for malformed ``.tamp`` files."""


@dataclass
class LabeledSample:
    cloud: np.ndarray
    label: int | None
    domain: str
    # target labels are kept for evaluation only and never used for training
    hidden_label: int | None = None

    @property
    def true_label(self) -> int | None:
        return self.label if self.label is not None else self.hidden_label


def _as_cloud(cloud) -> np.ndarray:
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError(f"expected a non-empty (N, 3) cloud, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("cloud contains non-finite coordinates")
    return pts


def normalize_unit(cloud) -> np.ndarray:
    """Center on the centroid and scale so the farthest point has norm 1."""
    pts = _as_cloud(cloud)
    centered = pts - pts.mean(axis=0)
    scale = np.sqrt((centered**2).sum(axis=1)).max()
    if not scale > 0.0:
        raise DegenerateInputError("all points coincide; cannot normalize")
    return centered / scale


def farthest_point_sample_batch(clouds: np.ndarray, n: int) -> np.ndarray:
    """Canonical FPS over a batch of equally sized clouds, shape (B, N, 3) -> (B, n)."""
    pts = np.asarray(clouds, dtype=np.float64)
    B, N, _ = pts.shape
    if not 1 <= n <= N:
        raise ValueError(f"cannot sample {n} points from a cloud of {N}")
    centroid = pts.mean(axis=1)
    return fps_kernel(np.ascontiguousarray(pts), centroid, n)


def farthest_point_sample(cloud, n: int) -> np.ndarray:
    """Indices of ``n`` points chosen by farthest point sampling.

    The first pick is the point farthest from the centroid; every later pick
    maximizes the distance to the already chosen set. Ties go to the
    lexicographically smallest coordinate, then the lowest index.
    """
    pts = _as_cloud(cloud)
    return farthest_point_sample_batch(pts[None], n)[0]


def k_smallest(dist: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest entries along the last axis.

    Sorted ascending, ties resolved toward the lowest index. Works on any
    leading shape.
    """
    n = dist.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    flat = dist.reshape(-1, n)
    if k == n:
        sel = np.argsort(flat, axis=1, kind="stable")
        return sel.reshape(dist.shape[:-1] + (k,))
    part = np.argpartition(flat, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(flat, part, axis=1)
    kth = vals.max(axis=1, keepdims=True)
    # rows where an unselected entry ties the boundary need the exact rule
    ambiguous = np.flatnonzero((flat <= kth).sum(axis=1) > k)
    order = np.lexsort((part, vals), axis=1)
    sel = np.take_along_axis(part, order, axis=1)
    for r in ambiguous:
        sel[r] = np.argsort(flat[r], kind="stable")[:k]
    return sel.reshape(dist.shape[:-1] + (k,))


def knn_indices(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """k nearest ``points`` for each query; (N, 3), (M, 3) -> (M, k).

    Also accepts batched inputs (B, N, 3), (B, M, 3).
    """
    return k_smallest(sq_dists(queries, points), k)


def sq_dists(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Squared distances (..., M, N), summed axis by axis in x, y, z order."""
    out = None
    for a in range(3):
        d = queries[..., :, None, a] - points[..., None, :, a]
        d *= d
        out = d if out is None else out.__iadd__(d)
    return out


def knn(points, query, k: int) -> np.ndarray:
    """Indices of the ``k`` points nearest to ``query`` in ascending distance."""
    pts = _as_cloud(points)
    if not 1 <= k <= len(pts):
        raise ValueError(f"k={k} outside [1, {len(pts)}]")
    q = np.asarray(query, dtype=np.float64).reshape(1, 3)
    return knn_indices(pts, q, k)[0]


# -- synthetic Sim2Real domains ------------------------------------------------

SHAPE_FAMILIES = ("sphere", "box", "cylinder", "cone", "torus")


@dataclass
class SynthConfig:
    classes: tuple[str, ...] = ("sphere", "box", "cylinder", "cone")
    points_per_cloud: int = 1024
    samples_per_class: int = 50
    crop_fraction: float = 0.3
    jitter_sigma: float = 0.02
    outlier_count: int = 16
    seed: int = 0
    # per-axis scale range for intra-class shape variance
    scale_range: tuple[float, float] = field(default=(0.6, 1.4))

    def validate(self) -> None:
        unknown = set(self.classes) - set(SHAPE_FAMILIES)
        if unknown:
            raise ValueError(f"unknown shape families {sorted(unknown)}")
        if len(self.classes) < 2:
            raise ValueError("need at least two classes")
        if self.points_per_cloud < 4:
            raise ValueError("points_per_cloud must be >= 4")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if not 0.0 <= self.crop_fraction <= 0.5:
            raise ValueError("crop_fraction must lie in [0, 0.5]")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        if self.outlier_count < 0 or self.outlier_count >= self.points_per_cloud:
            raise ValueError("outlier_count must lie in [0, points_per_cloud)")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")


def _unit_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _box(rng, n):
    # faces chosen proportional to area of a unit cube: uniform on the surface
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    for a in range(3):
        m = axis == a
        others = [i for i in range(3) if i != a]
        pts[m, a] = sign[m]
        pts[m, others[0]] = uv[m, 0]
        pts[m, others[1]] = uv[m, 1]
    return pts


def _cylinder(rng, n, radius=1.0, height=2.0):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    s = part == 0
    pts[s, 0] = radius * np.cos(theta[s])
    pts[s, 1] = radius * np.sin(theta[s])
    pts[s, 2] = rng.uniform(-height / 2, height / 2, size=s.sum())
    c = ~s
    r = radius * np.sqrt(rng.uniform(0, 1, size=c.sum()))
    pts[c, 0] = r * np.cos(theta[c])
    pts[c, 1] = r * np.sin(theta[c])
    pts[c, 2] = np.where(part[c] == 1, -height / 2, height / 2)
    return pts


def _cone(rng, n, radius=1.0, height=2.0):
    slant = np.sqrt(radius**2 + height**2)
    lateral = np.pi * radius * slant
    base = np.pi * radius**2
    on_side = rng.uniform(size=n) < lateral / (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    # lateral area density grows linearly with distance from the apex
    t = np.sqrt(rng.uniform(0, 1, size=n))
    r = np.where(on_side, radius * t, radius * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(on_side, height / 2 - height * t, -height / 2)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _torus(rng, n, major=1.0, minor=0.35):
    # rejection on the tube angle gives uniform area density
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 8
        u = rng.uniform(0, 2 * np.pi, size=m)
        v = rng.uniform(0, 2 * np.pi, size=m)
        keep = rng.uniform(0, 1, size=m) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out = np.vstack([out, np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], 1)])
    return out[:n]


_SAMPLERS = {
    "sphere": _unit_sphere,
    "box": _box,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
}


def sample_shape(family: str, n: int, rng: np.random.Generator, scale_range=(0.6, 1.4)) -> np.ndarray:
    """Uniform surface sample of a randomly scaled and z-rotated shape."""
    pts = _SAMPLERS[family](rng, n)
    pts = pts * rng.uniform(*scale_range, size=3)
    phi = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(phi), np.sin(phi)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return pts @ rot.T


def crop_halfspace(cloud: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Drop the ``fraction`` of points lying beyond a random plane."""
    if fraction <= 0:
        return cloud
    u = _unit_sphere(rng, 1)[0]
    proj = cloud @ u
    offset = np.quantile(proj, 1.0 - fraction)
    return cloud[proj <= offset]


def _corrupt(cloud, cfg: SynthConfig, rng):
    n = cfg.points_per_cloud
    kept = crop_halfspace(cloud, cfg.crop_fraction, rng)
    if len(kept) < n - cfg.outlier_count:
        extra = rng.choice(len(kept), size=n - cfg.outlier_count - len(kept), replace=True)
        kept = np.vstack([kept, kept[extra]])
    else:
        kept = kept[rng.choice(len(kept), size=n - cfg.outlier_count, replace=False)]
    if cfg.jitter_sigma > 0:
        kept = kept + rng.normal(scale=cfg.jitter_sigma, size=kept.shape)
    if cfg.outlier_count:
        lo, hi = kept.min(axis=0), kept.max(axis=0)
        kept = np.vstack([kept, rng.uniform(lo, hi, size=(cfg.outlier_count, 3))])
    return kept


def generate_domain(cfg: SynthConfig, domain: str) -> list[LabeledSample]:
    """One domain of the synthetic benchmark.

    Every sample draws from its own stream ``(seed, domain, class, index)`` so
    results do not depend on generation order.
    """
    cfg.validate()
    if domain not in ("source", "target"):
        raise ValueError(f"unknown domain {domain!r}")
    tag = 0 if domain == "source" else 1
    out = []
    for c, family in enumerate(cfg.classes):
        for i in range(cfg.samples_per_class):
            rng = np.random.default_rng([cfg.seed, tag, c, i])
            pts = sample_shape(family, cfg.points_per_cloud, rng, cfg.scale_range)
            if domain == "target":
                pts = _corrupt(pts, cfg, rng)
                cloud = normalize_unit(pts)
                out.append(LabeledSample(cloud, None, domain, hidden_label=c))
            else:
                out.append(LabeledSample(normalize_unit(pts), c, domain))
    return out


def generate_domain_pair(cfg: SynthConfig) -> tuple[list[LabeledSample], list[LabeledSample]]:
    """Clean "simulated" source domain and cropped, jittered "real" target domain."""
    return generate_domain(cfg, "source"), generate_domain(cfg, "target")


# -- file I/O --------------------------------------------------------------------


def write_cloud(cloud, path) -> None:
    pts = _as_cloud(cloud).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(pts), 0))
        fh.write(pts.tobytes())


def read_cloud(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CloudFormatError(f"{path}: truncated header")
    magic, version, count, _ = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CloudFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CloudFormatError(f"{path}: unsupported version {version}")
    payload = raw[_HEADER.size :]
    if len(payload) != 12 * count:
        raise CloudFormatError(f"{path}: expected {12 * count} payload bytes, got {len(payload)}")
    pts = np.frombuffer(payload, dtype="<f4").reshape(count, 3).astype(np.float64)
    if not np.all(np.isfinite(pts)):
        raise CloudFormatError(f"{path}: non-finite coordinates")
    return pts


def write_dataset(samples: list[LabeledSample], root, labels_name: str = "labels.csv") -> Path:
    """Write clouds under ``root/<domain>/`` plus a ``path,label,domain`` index.

    Target rows carry the hidden evaluation label.
    """
    root = Path(root)
    lines = []
    counters: dict[str, int] = {}
    for s in samples:
        i = counters.get(s.domain, 0)
        counters[s.domain] = i + 1
        rel = Path(s.domain) / f"{i:05d}.tamp"
        (root / s.domain).mkdir(parents=True, exist_ok=True)
        write_cloud(s.cloud, root / rel)
        lines.append(f"{rel.as_posix()},{s.true_label},{s.domain}")
    index = root / labels_name
    index.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return index


def read_dataset(root, labels_name: str = "labels.csv") -> tuple[list[LabeledSample], list[LabeledSample]]:
    root = Path(root)
    source, target = [], []
    for line in (root / labels_name).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rel, label, domain = line.rsplit(",", 2)
        cloud = read_cloud(root / rel)
        if domain == "source":
            source.append(LabeledSample(cloud, int(label), domain))
        elif domain == "target":
            target.append(LabeledSample(cloud, None, domain, hidden_label=int(label)))
        else:
            raise CloudFormatError(f"unknown domain tag {domain!r} in {rel}")
    return source, target
