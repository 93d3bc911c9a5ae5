"""Ablation benchmark on the synthetic Sim2Real pair.

Five variants share data and initial weights for a given seed:

* ``source_only``: source CE alone
* ``cdmix``: source CE plus mixup consistency
* ``ssl``: source CE plus implicit-field and part/global similarity terms
* ``cdmix_ssl``: all pretraining terms
* ``full``: ``cdmix_ssl`` followed by contrastive self-training
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .evaluation import evaluate
from .geometry import SynthConfig, generate_domain_pair
from .implicit import ImplicitConfig
from .losses import LossWeights
from .models import ModelBundle, ModelConfig
from .posenc import PosEncConfig
from .prepare import prepare
from .selftrain import SelfTrainConfig, TrainConfig, pretrain, run_self_training

__all__ = ["BenchmarkConfig", "VARIANTS", "prepare_pair", "run_variants"]

VARIANTS = ("source_only", "cdmix", "ssl", "cdmix_ssl", "full")

_PRETRAIN_WEIGHTS = {
    "source_only": LossWeights(target=0, cdc=0, imp=0, mix=0, sim=0),
    "cdmix": LossWeights(target=0, cdc=0, imp=0, mix=1, sim=0),
    "ssl": LossWeights(target=0, cdc=0, imp=1, mix=0, sim=0.1),
    "cdmix_ssl": LossWeights(target=0, cdc=0),
}


@dataclass(frozen=True)
class BenchmarkConfig:
    """Reduced scale that fits the single-machine runtime budget."""

    synth: SynthConfig = field(default_factory=lambda: SynthConfig(points_per_cloud=256, samples_per_class=200))
    posenc: PosEncConfig = field(default_factory=lambda: PosEncConfig(d0=12))
    implicit: ImplicitConfig = field(default_factory=lambda: ImplicitConfig(n_query=8, k_part=32))
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, mix_pairs=8))
    selftrain: SelfTrainConfig = field(default_factory=lambda: SelfTrainConfig(rounds=5, epochs_per_round=2))

    def model_config(self) -> ModelConfig:
        return ModelConfig(global_dim=self.posenc.out_dim, n_classes=len(self.synth.classes))


def prepare_pair(cfg: BenchmarkConfig, seed: int):
    S, T = generate_domain_pair(replace(cfg.synth, seed=seed))
    edge_k = cfg.model_config().edge_k
    return (prepare(S, cfg.posenc, cfg.implicit, edge_k, seed),
            prepare(T, cfg.posenc, cfg.implicit, edge_k, seed))


def run_variants(cfg: BenchmarkConfig, seed: int, variants=VARIANTS, log=None) -> dict[str, float]:
    """Target accuracy per variant for one seed."""
    t0 = time.perf_counter()
    PS, PT = prepare_pair(cfg, seed)
    if log:
        log(f"seed {seed}: prepared {len(PS)}+{len(PT)} clouds in {time.perf_counter() - t0:.1f}s")
    out = {}
    need = set(variants)
    if "full" in need:
        need.add("cdmix_ssl")
    for name in [v for v in VARIANTS if v in need and v != "full"]:
        t = time.perf_counter()
        bundle = ModelBundle(cfg.model_config(), seed=seed, posenc=cfg.posenc)
        pretrain(bundle, PS, PT, replace(cfg.pretrain, weights=_PRETRAIN_WEIGHTS[name], seed=seed))
        out[name] = evaluate(bundle, PT).accuracy
        if log:
            log(f"seed {seed}: {name} target acc {out[name]:.4f} ({time.perf_counter() - t:.1f}s)")
        if name == "cdmix_ssl" and "full" in need:
            t = time.perf_counter()
            run_self_training(bundle, PS, PT, replace(cfg.selftrain, seed=seed))
            out["full"] = evaluate(bundle, PT).accuracy
            if log:
                log(f"seed {seed}: full target acc {out['full']:.4f} ({time.perf_counter() - t:.1f}s)")
    return {k: out[k] for k in VARIANTS if k in variants}
