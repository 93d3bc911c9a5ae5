"""Trainable networks.

Two heads share the target of classifying a cloud:

* REG: non-parametric global feature -> projector -> classifier.
* PCG: parts -> local edge-conv encoder -> part graph -> classifier.

The decoder regresses (direction, distance) of a query from its part feature.
Every forward here is batched; single-sample helpers wrap them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue, ParamSet
from .geometry import k_smallest, knn_indices
from .posenc import PosEncConfig, encode_global

__all__ = [
    "ModelConfig",
    "HeadOutput",
    "Linear",
    "BatchNorm",
    "MLP",
    "EdgeConv",
    "LocalEncoder",
    "PartGraph",
    "ModelBundle",
    "max_relative_conv",
    "feature_knn",
]

RESERVED_PREFIXES = ("proj", "cls_reg", "local", "dec", "pcg", "cls_pcg")


@dataclass(frozen=True)
class ModelConfig:
    global_dim: int = 576
    d: int = 64
    n_classes: int = 4
    proj_hidden: int = 128
    cls_hidden: tuple[int, ...] = (64, 32)
    edge_widths: tuple[int, ...] = (32, 64)
    edge_k: int = 8
    dec_hidden: tuple[int, ...] = (64, 32)
    graph_k: int = 4
    pcg_hidden: int = 64

    def validate(self) -> None:
        if self.edge_widths[-1] != self.d:
            raise ValueError("last edge-conv width must equal the feature width d")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.edge_k < 1 or self.graph_k < 1:
            raise ValueError("neighbor counts must be positive")


@dataclass
class HeadOutput:
    z: DiffValue
    logits: DiffValue


class Module:
    def __init__(self):
        self._params: dict[str, DiffValue] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def named_params(self, prefix=""):
        for k, v in self._params.items():
            yield prefix + k, v
        for k, c in self._children.items():
            yield from c.named_params(f"{prefix}{k}.")

    def named_buffers(self, prefix=""):
        for k, v in self._buffers.items():
            yield prefix + k, v
        for k, c in self._children.items():
            yield from c.named_buffers(f"{prefix}{k}.")

    def set_training(self, flag: bool) -> None:
        self.training = flag
        for c in self._children.values():
            c.set_training(flag)


def _weight(rng, n_in, n_out, gain=2.0):
    return DiffValue(rng.normal(0.0, np.sqrt(gain / n_in), size=(n_in, n_out)), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, gain=2.0):
        super().__init__()
        self._params["W"] = _weight(rng, n_in, n_out, gain)
        if bias:
            self._params["b"] = DiffValue(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        y = ad.matmul(x, self._params["W"])
        b = self._params.get("b")
        return y if b is None else y + b


class BatchNorm(Module):
    def __init__(self, n):
        super().__init__()
        self._params["gamma"] = DiffValue(np.ones(n), requires_grad=True)
        self._params["beta"] = DiffValue(np.zeros(n), requires_grad=True)
        self._buffers["running_mean"] = np.zeros(n)
        self._buffers["running_var"] = np.ones(n)

    def __call__(self, x):
        return ad.batch_norm(
            x,
            self._params["gamma"],
            self._params["beta"],
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=self.training,
        )


class MLP(Module):
    """Linear layers with (optional) batch norm and ReLU between them."""

    def __init__(self, widths, rng, batch_norm=True):
        super().__init__()
        self.depth = len(widths) - 1
        self.batch_norm = batch_norm
        for i in range(self.depth):
            last = i == self.depth - 1
            self._children[f"fc{i}"] = Linear(widths[i], widths[i + 1], rng, gain=1.0 if last else 2.0)
            if not last and batch_norm:
                self._children[f"bn{i}"] = BatchNorm(widths[i + 1])

    def __call__(self, x):
        for i in range(self.depth):
            x = self._children[f"fc{i}"](x)
            if i < self.depth - 1:
                if self.batch_norm:
                    x = self._children[f"bn{i}"](x)
                x = ad.relu(x)
        return x


def feature_knn(x: np.ndarray, k: int) -> np.ndarray:
    """Per-set kNN over feature rows, (S, n, c) -> (S, n, k); self is included."""
    sq = (x**2).sum(-1)
    d = sq[..., :, None] + sq[..., None, :] - 2.0 * np.einsum("snc,smc->snm", x, x)
    n = x.shape[1]
    # pin the diagonal so a node is always its own nearest neighbor
    d[:, np.arange(n), np.arange(n)] = -np.inf
    return k_smallest(d, k)


def _flat_index(idx: np.ndarray) -> np.ndarray:
    # (S, n, k) per-set indices -> rows of the flattened (S*n, c) array
    S, n, _ = idx.shape
    return (idx + (np.arange(S) * n)[:, None, None]).reshape(S * n, -1)


class EdgeConv(Module):
    """Edge convolution with a linear edge function.

    ``max_j (x_i W_self + (x_j - x_i) W_nbr) + b`` followed by batch norm and
    ReLU. The max is taken before the nonlinearity, so the edge tensor never
    has to be materialized.
    """

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self._params["W_self"] = _weight(rng, c_in, c_out, gain=1.0)
        self._params["W_nbr"] = _weight(rng, c_in, c_out, gain=1.0)
        self._params["b"] = DiffValue(np.zeros(c_out), requires_grad=True)
        self._children["bn"] = BatchNorm(c_out)

    def __call__(self, x: DiffValue, idx: np.ndarray) -> DiffValue:
        # x: (S, n, c_in), idx: (S, n, k)
        S, n, c = x.shape
        flat = ad.reshape(x, (S * n, c))
        w_s, w_n = self._params["W_self"], self._params["W_nbr"]
        center = ad.matmul(flat, w_s) - ad.matmul(flat, w_n) + self._params["b"]
        agg = ad.neighbor_max(ad.matmul(flat, w_n), _flat_index(idx))
        out = self._children["bn"](center + agg)
        return ad.reshape(ad.relu(out), (S, n, out.shape[-1]))


class LocalEncoder(Module):
    """Two edge-conv layers (spatial, then feature-space neighbors) and max+mean pooling."""

    def __init__(self, widths, k, rng):
        super().__init__()
        self.k = k
        c_in = 3
        for i, w in enumerate(widths):
            self._children[f"ec{i}"] = EdgeConv(c_in, w, rng)
            c_in = w
        self.n_layers = len(widths)

    def __call__(self, parts, first_knn: np.ndarray | None = None) -> DiffValue:
        parts = np.asarray(parts, dtype=np.float64)
        if parts.shape[1] < self.k:
            raise ValueError(f"parts need at least {self.k} members for the edge convolution")
        idx = first_knn if first_knn is not None else knn_indices(parts, parts, self.k)
        x = DiffValue(parts)
        for i in range(self.n_layers):
            if i > 0:
                idx = feature_knn(x.data, self.k)
            x = self._children[f"ec{i}"](x, idx)
        return ad.max(x, axis=1) + ad.mean(x, axis=1)


def max_relative_conv(z, neighbors, w_agg, w_update) -> DiffValue:
    """Max-relative graph convolution on one graph.

    ``z'_i = [z_i, max_{j in N(i)} (z_j W_agg - z_i)] W_update``. ``neighbors``
    is either an (n, K) index array or a list of per-node index lists; an
    empty list means a self-loop.
    """
    z = ad.as_value(z)
    if isinstance(neighbors, np.ndarray) and neighbors.ndim == 2:
        idx = neighbors
    else:
        lists = [list(nb) if len(nb) else [i] for i, nb in enumerate(neighbors)]
        width = max(len(nb) for nb in lists)
        # pad by repeating the first neighbor; max is unaffected
        idx = np.array([nb + [nb[0]] * (width - len(nb)) for nb in lists], dtype=np.int64)
    rel = ad.neighbor_max(ad.matmul(z, w_agg), idx) - z
    return ad.matmul(ad.concat([z, rel], axis=-1), w_update)


class PartGraph(Module):
    """Graph over part features: linear, max-relative conv, linear, residual, node MLP, max-pool."""

    def __init__(self, d, hidden, k, rng):
        super().__init__()
        self.k = k
        p = self._params
        p["W1"] = _weight(rng, d, d, gain=1.0)
        p["W_agg"] = _weight(rng, d, d, gain=1.0)
        p["W_update"] = _weight(rng, 2 * d, d, gain=1.0)
        p["W2"] = _weight(rng, d, d, gain=1.0)
        p["W3"] = _weight(rng, d, hidden, gain=2.0)
        p["W4"] = _weight(rng, hidden, d, gain=1.0)

    def __call__(self, z) -> DiffValue:
        z = ad.as_value(z)
        B, n, d = z.shape
        if n < 2:
            raise ValueError("the part graph needs at least two nodes")
        p = self._params
        idx = _flat_index(feature_knn(z.data, min(self.k, n)))
        y = ad.reshape(ad.matmul(z, p["W1"]), (B * n, d))
        g = max_relative_conv(y, idx, p["W_agg"], p["W_update"])
        f = ad.matmul(ad.relu(g), p["W2"]) + ad.reshape(z, (B * n, d))
        h = ad.matmul(ad.relu(ad.matmul(f, p["W3"])), p["W4"]) + f
        return ad.max(ad.reshape(h, (B, n, d)), axis=1)


class ModelBundle(Module):
    """All trainable weights plus the fixed global-encoder configuration."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, posenc: PosEncConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        cfg.validate()
        self.posenc = posenc or PosEncConfig()
        rng = np.random.default_rng(seed)
        C, d = cfg.n_classes, cfg.d
        self._children["proj"] = MLP([cfg.global_dim, cfg.proj_hidden, d], rng)
        self._children["cls_reg"] = MLP([d, *cfg.cls_hidden, C], rng)
        self._children["local"] = LocalEncoder(cfg.edge_widths, cfg.edge_k, rng)
        self._children["dec"] = MLP([d + 3, *cfg.dec_hidden, 4], rng, batch_norm=False)
        self._children["pcg"] = PartGraph(d, cfg.pcg_hidden, cfg.graph_k, rng)
        self._children["cls_pcg"] = MLP([d, *cfg.cls_hidden, C], rng)
        self.params = ParamSet()
        for name, p in self.named_params():
            self.params[name] = p

    def __getattr__(self, name):
        children = self.__dict__.get("_children", {})
        if name in children:
            return children[name]
        raise AttributeError(name)

    def train(self):
        self.set_training(True)
        return self

    def eval(self):
        self.set_training(False)
        return self

    # -- forward paths -------------------------------------------------------

    def forward_reg(self, global_features) -> HeadOutput:
        """REG head from precomputed global features (B, global_dim)."""
        z = self.proj(ad.as_value(np.atleast_2d(global_features)))
        return HeadOutput(z, self.cls_reg(z))

    def forward_reg_cloud(self, cloud) -> HeadOutput:
        return self.forward_reg(encode_global(cloud, self.posenc)[None])

    def local_encode(self, parts, first_knn=None) -> DiffValue:
        """Part features, (P, k_part, 3) centered coordinates -> (P, d)."""
        return self.local(parts, first_knn)

    def decode_implicit(self, z_c, c) -> DiffValue:
        """(P, d) part features and (P, 3) raw query coordinates -> (P, 4)."""
        return self.dec(ad.concat([ad.as_value(z_c), ad.as_value(np.atleast_2d(c))], axis=-1))

    def pcg_forward(self, node_features) -> HeadOutput:
        """PCG head from part features (B, n_nodes, d)."""
        z = self.pcg(node_features)
        return HeadOutput(z, self.cls_pcg(z))

    def forward_parts(self, parts, first_knn=None):
        """Encode (B, n, k_part, 3) parts once; returns (node features (B, n, d), PCG head)."""
        parts = np.asarray(parts, dtype=np.float64)
        B, n = parts.shape[:2]
        flat_knn = None if first_knn is None else first_knn.reshape((B * n,) + first_knn.shape[2:])
        zc = self.local_encode(parts.reshape((B * n,) + parts.shape[2:]), flat_knn)
        nodes = ad.reshape(zc, (B, n, zc.shape[-1]))
        return zc, self.pcg_forward(nodes)

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.named_params()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_params())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
        for k, v in state.items():
            if k in params:
                params[k].data[...] = v
            elif k in buffers:
                buffers[k][...] = v
            else:
                raise KeyError(f"unexpected checkpoint entry {k!r}")

    def round_to_f32(self) -> None:
        """Quantize weights and buffers to checkpoint precision."""
        for _, p in self.named_params():
            p.data[...] = p.data.astype(np.float32)
        for _, b in self.named_buffers():
            b[...] = b.astype(np.float32)
