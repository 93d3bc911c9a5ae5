"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``. The synthetic
benchmark (criterion 7) dominates the runtime at roughly 20 minutes on one
core; set ``TAM_SKIP_BENCHMARK=1`` to skip it during development.
"""

import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import qmc

from tam.benchmark import BenchmarkConfig, run_variants
from tam.cli import main
from tam.evaluation import a_distance
from tam.geometry import SynthConfig, generate_domain, generate_domain_pair
from tam.gradsuite import CASES, run_gradient_suite
from tam.implicit import approx_dist_batch
from tam.losses import cdc_loss, implicit_loss, mix_loss, sim_loss
from tam.models import ModelBundle, ModelConfig
from tam.posenc import PosEncConfig, encode_global, encode_global_batch, pos_encode
from tam.selftrain import select_from_probs, threshold_schedule


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail

    return emit


def test_gradient_suite(verdict):
    t = time.perf_counter()
    errors = run_gradient_suite(instances=20, eps=1e-5)
    took = time.perf_counter() - t
    worst = max(errors, key=errors.get)
    losses = [k for k in CASES if k.startswith("loss_")]
    ok = errors[worst] < 1e-4 and took < 120 and len(losses) == 7
    verdict(1, "gradient suite", ok,
            f"{len(errors)} cases x 20 instances, worst {worst}={errors[worst]:.2e}, {took:.1f}s")


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def _projection_errors(cloud, queries, true_d):
    d, _ = approx_dist_batch(queries, cloud, 10)
    return np.abs(d - true_d) / true_d


def test_surface_projection(verdict):
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    dist = np.repeat([0.05, 0.1], 250)
    side = rng.choice([-1.0, 1.0], size=500)

    dirs = rng.normal(size=(500, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    sphere_q = dirs * (1 + side * dist)[:, None]
    plane_q = np.column_stack([rng.uniform(-0.5, 0.5, size=(500, 2)), side * dist])
    halton = qmc.Halton(d=2, seed=0).random(2048) * 2 - 1
    plane = np.column_stack([halton, np.zeros(2048)])

    sphere_ok = (_projection_errors(_fibonacci_sphere(2048), sphere_q, dist) < 0.1).mean()
    plane_ok = (_projection_errors(plane, plane_q, dist) < 0.1).mean()
    # i.i.d. samples, reported for comparison only
    iid = rng.normal(size=(2048, 3))
    iid /= np.linalg.norm(iid, axis=1, keepdims=True)
    iid_ok = (_projection_errors(iid, sphere_q, dist) < 0.1).mean()
    took = time.perf_counter() - t
    ok = sphere_ok >= 0.95 and plane_ok >= 0.95 and took < 60
    verdict(2, "surface projection", ok,
            f"within 10%: sphere {sphere_ok:.3f}, plane {plane_ok:.3f} (i.i.d. sphere {iid_ok:.3f}), {took:.1f}s")


def test_positional_encoding(verdict):
    cfg = PosEncConfig()
    origin = np.array_equal(pos_encode(np.zeros(3), cfg), np.tile([0.0, 1.0], cfg.d0 // 2))
    rng = np.random.default_rng(0)
    pts = np.concatenate([rng.uniform(-1, 1, size=(500, 3)), rng.normal(scale=100, size=(500, 3))])
    bounded = all(np.all(np.abs(pos_encode(p, cfg)) <= 1.0) for p in pts)
    v = pos_encode(np.array([0.01, 0.0, 0.0]), PosEncConfig(d0=6))
    single = abs(v[0] - math.sin(1.0)) < 1e-12 and abs(v[1] - math.cos(1.0)) < 1e-12
    verdict(3, "positional encoding", origin and bounded and single,
            f"origin pattern {origin}, bounded {bounded}, sin/cos(1) {single}")


def test_invariance(verdict):
    rng = np.random.default_rng(0)
    pe = PosEncConfig(d0=12)
    model = ModelBundle(ModelConfig(global_dim=pe.out_dim, d=32, edge_widths=(16, 32), pcg_hidden=32), seed=0,
                        posenc=pe).eval()
    worst = {"encode_global": 0.0, "local_encode": 0.0, "pcg_forward": 0.0}
    for _ in range(50):
        c = rng.normal(size=(256, 3))
        worst["encode_global"] = max(worst["encode_global"], np.abs(
            encode_global(c, pe) - encode_global(c[rng.permutation(256)], pe)).max())
        part = rng.normal(size=(1, 32, 3)) * 0.1
        worst["local_encode"] = max(worst["local_encode"], np.abs(
            model.local_encode(part).data - model.local_encode(part[:, rng.permutation(32)]).data).max())
        nodes = rng.normal(size=(1, 8, 32))
        worst["pcg_forward"] = max(worst["pcg_forward"], np.abs(
            model.pcg_forward(nodes).z.data - model.pcg_forward(nodes[:, rng.permutation(8)]).z.data).max())
    verdict(4, "permutation invariance", max(worst.values()) < 1e-6,
            ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_self_training_mechanics(verdict):
    seq = threshold_schedule(0.8, 0.005, 5)
    seq_ok = seq == [0.800, 0.805, 0.810, 0.815, 0.820, 0.825]
    rng = np.random.default_rng(0)
    mono = 0
    for _ in range(100):
        logits = rng.normal(size=(int(rng.integers(5, 50)), 4)) * 3
        p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        theta = rng.uniform(0.3, 0.95)
        lo, hi = select_from_probs(p, theta), select_from_probs(p, theta + 0.005)
        mono += bool(np.all(hi.selected <= lo.selected) and np.array_equal(hi.labels[hi.selected == 1],
                                                                            lo.labels[hi.selected == 1]))
    lam = np.random.default_rng([0, 12]).beta(2.0, 2.0, size=10_000).mean()
    ok = seq_ok and mono == 100 and abs(lam - 0.5) <= 0.02
    verdict(5, "self-training mechanics", ok, f"thresholds {seq}, monotone {mono}/100, Beta(2,2) mean {lam:.4f}")


def test_loss_bounds(verdict):
    rng = np.random.default_rng(0)
    lo = {"cdc": np.inf, "mix": np.inf, "sim": np.inf, "imp": np.inf}
    hi = {"mix": -np.inf, "sim": -np.inf}
    for _ in range(1000):
        C, d = int(rng.integers(2, 6)), int(rng.integers(2, 10))
        scale = 10 ** rng.uniform(-2, 2)
        logits = rng.normal(size=(3, C)) * scale
        y = rng.dirichlet(np.ones(C), size=3)
        z1, z2 = rng.normal(size=(3, d)) * scale, rng.normal(size=(3, d))
        bank = rng.normal(size=(8, d))
        m = float(mix_loss(logits, y).data)
        s = float(sim_loss(z1, z2).data)
        c = float(cdc_loss(z1, rng.integers(0, 3, size=3), bank, np.arange(8) % 3, tau=0.1)[0].data)
        i = float(implicit_loss(rng.normal(size=(5, 4)) * scale, rng.normal(size=(5, 4))).data)
        lo.update(cdc=min(lo["cdc"], c), mix=min(lo["mix"], m), sim=min(lo["sim"], s), imp=min(lo["imp"], i))
        hi.update(mix=max(hi["mix"], m), sim=max(hi["sim"], s))
    tol = 1e-12
    ok = (lo["cdc"] >= -tol and lo["imp"] >= 0 and lo["mix"] >= -tol and hi["mix"] <= 2 + tol
          and lo["sim"] >= -tol and hi["sim"] <= 2 + tol)
    verdict(6, "loss bounds", ok,
            f"cdc min {lo['cdc']:.3g}, mix [{lo['mix']:.3g}, {hi['mix']:.3g}], sim [{lo['sim']:.3g}, "
            f"{hi['sim']:.3g}], implicit min {lo['imp']:.3g}")


@pytest.mark.skipif(os.environ.get("TAM_SKIP_BENCHMARK") == "1", reason="TAM_SKIP_BENCHMARK=1")
def test_synthetic_benchmark(verdict, capsys):
    cfg = BenchmarkConfig()
    t = time.perf_counter()
    per_seed = []
    for seed in range(3):
        with capsys.disabled():
            per_seed.append(run_variants(cfg, seed, log=lambda m: print(f"  {m}", flush=True)))
    took = time.perf_counter() - t
    mean = {k: float(np.mean([r[k] for r in per_seed])) for k in per_seed[0]}
    gain = mean["full"] - mean["source_only"]
    ok = gain >= 0.05 and mean["full"] >= mean["cdmix"] and mean["full"] >= mean["ssl"] and took <= 1800
    cores = os.cpu_count()
    verdict(7, "synthetic Sim2Real ablation", ok,
            ", ".join(f"{k} {v:.4f}" for k, v in mean.items())
            + f"; full - source_only = {gain * 100:+.2f} pts; {took / 60:.1f} min on {cores} core(s)")


def test_a_distance(verdict):
    synth = SynthConfig(points_per_cloud=256, samples_per_class=100)
    pe = PosEncConfig(d0=12)

    def feats(samples):
        return encode_global_batch(np.stack([s.cloud for s in samples]), pe)

    same, shifted = [], []
    for seed in range(3):
        a = feats(generate_domain(replace(synth, seed=2 * seed), "source"))
        b = feats(generate_domain(replace(synth, seed=2 * seed + 1), "source"))
        S, T = generate_domain_pair(replace(synth, seed=2 * seed))
        same.append(a_distance(a, b, seed=seed))
        shifted.append(a_distance(feats(S), feats(T), seed=seed))
    ok = 0.8 <= np.mean(same) <= 1.2 and np.mean(shifted) > np.mean(same)
    verdict(8, "A-distance", ok,
            f"identical generator mean {np.mean(same):.3f} {np.round(same, 3).tolist()}, "
            f"clean vs corrupted mean {np.mean(shifted):.3f} {np.round(shifted, 3).tolist()}")


def test_determinism(verdict, tmp_path):
    cfg = tmp_path / "run.txt"
    cfg.write_text("points_per_cloud = 256\nsamples_per_class = 10\nd0 = 12\nn_query = 8\nk_part = 32\nd = 32\n"
                   "pretrain_epochs = 3\nrounds = 2\nepochs_per_round = 2\ntheta0 = 0.5\nepsilon = 0.05\nseed = 7\n")
    assert main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    data = tmp_path / "data/generate-data-001"
    for _ in range(2):
        assert main(["adapt", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "runs")]) == 0
    a, b = tmp_path / "runs/adapt-001", tmp_path / "runs/adapt-002"
    same = {name: (a / name).read_bytes() == (b / name).read_bytes()
            for name in ("metrics.csv", "pretrain_metrics.csv", "final.csv", "model.tamw")}
    verdict(9, "determinism", all(same.values()), ", ".join(f"{k} identical={v}" for k, v in same.items()))
