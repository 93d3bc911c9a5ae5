"""Flat ``key = value`` run configuration.

Every tunable in the pipeline has one key here. Files are UTF-8 with ``#``
comments; unknown keys are rejected. ``TAM_SEED`` in the environment
overrides ``seed``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .geometry import SynthConfig
from .implicit import ImplicitConfig
from .losses import LossWeights
from .models import ModelConfig
from .posenc import PosEncConfig, StageConfig
from .selftrain import SelfTrainConfig, TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config_text", "load_config"]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # synthetic data
    classes: str = "sphere,box,cylinder,cone"
    points_per_cloud: int = 1024
    samples_per_class: int = 50
    crop_fraction: float = 0.3
    jitter_sigma: float = 0.02
    outlier_count: int = 16
    # global encoder
    d0: int = 36
    alpha: float = 100.0
    beta: float = 500.0
    stage_ratio: float = 0.5
    stage_k: int = 16
    # implicit field and parts
    voxel_res: int = 12
    d_lower: float = 0.02
    d_upper: float = 0.12
    approx_m: int = 10
    n_query: int = 16
    k_part: int = 64
    # networks
    d: int = 64
    edge_k: int = 8
    graph_k: int = 4
    # pretraining
    pretrain_epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    min_lr: float = 1e-5
    kappa: float = 2.0
    mix_pairs: int = 8
    # self-training
    rounds: int = 5
    epochs_per_round: int = 10
    theta0: float = 0.8
    epsilon: float = 0.005
    tau: float = 0.1
    self_lr: float = 5e-4
    # loss weights
    lambda_t: float = 1.0
    lambda_cdc: float = 1.0
    lambda_imp: float = 1.0
    lambda_mix: float = 1.0
    lambda_sim: float = 0.1

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def updated(self, pairs: dict[str, str]) -> RunConfig:
        """Copy with string values converted to each key's type."""
        types = {f.name: type(f.default) for f in fields(self)}
        values = dict(vars(self))
        for k, raw in pairs.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            try:
                values[k] = types[k](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {raw!r}") from exc
        out = RunConfig(**values)
        out.validate()
        return out

    def with_env(self, environ=None) -> RunConfig:
        env = os.environ if environ is None else environ
        if env.get("TAM_SEED", "").strip():
            return self.updated({"seed": env["TAM_SEED"]})
        return self

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in vars(self).items())

    # -- component configs --------------------------------------------------

    def synth(self) -> SynthConfig:
        return SynthConfig(classes=tuple(c.strip() for c in self.classes.split(",")),
                           points_per_cloud=self.points_per_cloud, samples_per_class=self.samples_per_class,
                           crop_fraction=self.crop_fraction, jitter_sigma=self.jitter_sigma,
                           outlier_count=self.outlier_count, seed=self.seed)

    def posenc(self) -> PosEncConfig:
        stage = StageConfig(ratio=self.stage_ratio, k=self.stage_k)
        return PosEncConfig(d0=self.d0, alpha=self.alpha, beta=self.beta, stages=(stage,) * 4)

    def implicit(self) -> ImplicitConfig:
        return ImplicitConfig(l=self.voxel_res, d_lower=self.d_lower, d_upper=self.d_upper, M=self.approx_m,
                              n_query=self.n_query, k_part=self.k_part)

    def model(self) -> ModelConfig:
        return ModelConfig(global_dim=self.posenc().out_dim, d=self.d, n_classes=len(self.synth().classes),
                           edge_widths=(max(1, self.d // 2), self.d), edge_k=self.edge_k,
                           graph_k=self.graph_k, pcg_hidden=self.d)

    def weights(self, pretraining: bool = False) -> LossWeights:
        t, cdc = (0.0, 0.0) if pretraining else (self.lambda_t, self.lambda_cdc)
        return LossWeights(target=t, cdc=cdc, imp=self.lambda_imp, mix=self.lambda_mix, sim=self.lambda_sim)

    def train(self) -> TrainConfig:
        return TrainConfig(epochs=self.pretrain_epochs, batch_size=self.batch_size, lr=self.lr, min_lr=self.min_lr,
                           kappa=self.kappa, mix_pairs=self.mix_pairs, weights=self.weights(True), seed=self.seed)

    def selftrain(self) -> SelfTrainConfig:
        return SelfTrainConfig(rounds=self.rounds, epochs_per_round=self.epochs_per_round, theta0=self.theta0,
                               epsilon=self.epsilon, batch_size=self.batch_size, lr=self.self_lr,
                               min_lr=self.min_lr, tau=self.tau, kappa=self.kappa, mix_pairs=self.mix_pairs,
                               weights=self.weights(), seed=self.seed)

    def validate(self) -> None:
        try:
            self.synth().validate()
            self.posenc().validate()
            self.implicit().validate()
            self.model().validate()
            self.train().validate()
            self.selftrain().validate()
            if not self.edge_k <= self.k_part <= self.points_per_cloud:
                raise ValueError("need edge_k <= k_part <= points_per_cloud")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"line {n}: empty key")
        if k in pairs:
            raise ConfigError(f"line {n}: duplicate key {k!r}")
        pairs[k] = v
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None, environ=None) -> RunConfig:
    """Defaults, then the file, then explicit overrides, then ``TAM_SEED``."""
    cfg = RunConfig()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = cfg.updated(parse_config_text(fh.read()))
    if overrides:
        cfg = cfg.updated(overrides)
    return cfg.with_env(environ)
