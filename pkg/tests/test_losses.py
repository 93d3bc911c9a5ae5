import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import softmax
from tam import autodiff as ad
from tam.geometry import farthest_point_sample
from tam.losses import (
    LossWeights,
    cdc_loss,
    cdmix,
    implicit_loss,
    mix_clouds,
    mix_loss,
    sim_loss,
    source_ce,
    spst_target_loss,
    threshold_from_gamma,
    total_loss,
)

vec = st.integers(2, 8).flatmap(lambda n: arrays(np.float64, (3, n), elements=st.floats(-5, 5)))


class TestSourceCE:
    def test_certain_is_zero(self):
        p = np.array([[0.0, 1.0, 0.0]])
        assert float(source_ce(p, p, [1]).data) == 0.0

    def test_half_half(self):
        p = np.array([[0.5, 0.5]])
        assert abs(float(source_ce(p, p, [0]).data) - 2 * math.log(2)) < 1e-12

    def test_decomposes_into_two_ces(self):
        rng = np.random.default_rng(0)
        p1, p2 = softmax(rng.normal(size=(6, 4))), softmax(rng.normal(size=(6, 4)))
        y = rng.integers(0, 4, size=6)
        ce = lambda p: -np.mean(np.log(p[np.arange(6), y]))  # noqa: E731
        assert abs(float(source_ce(p1, p2, y).data) - (ce(p1) + ce(p2))) < 1e-12

    def test_zero_probability_clamped(self):
        p = np.array([[1.0, 0.0]])
        assert np.isclose(float(source_ce(p, p, [1]).data), -2 * math.log(1e-12))


class TestSPST:
    def test_unselected_contributes_nothing(self):
        p = softmax(np.random.default_rng(0).normal(size=(3, 4)))
        assert float(spst_target_loss(p, p, np.zeros((3, 4)), 0.2).data) == 0.0
        sel = np.zeros((3, 4))
        sel[1, 2] = 1
        one = spst_target_loss(p[1:2], p[1:2], sel[1:2], 0.2).data
        assert float(spst_target_loss(p, p, sel, 0.2).data) == float(one)

    def test_value(self):
        p = np.array([[0.2, 0.8]])
        gamma = -math.log(0.8)
        got = float(spst_target_loss(p, p, np.array([[0.0, 1.0]]), gamma).data)
        assert abs(got - (-(2 * math.log(0.8) + gamma))) < 1e-12

    def test_selection_rule_matches_threshold(self):
        # per sample, selecting class c lowers the objective iff -(log q + gamma) < 0,
        # where q = p[c] of the single-head prediction; enumerate both options
        rng = np.random.default_rng(1)
        theta0 = 0.8
        gamma = -math.log(theta0)
        agree = 0
        for _ in range(100):
            p = softmax(rng.normal(size=(1, 4)) * 3)
            c = int(p.argmax())
            onehot = np.eye(4)[[c]]
            sqrt_p = np.sqrt(p)  # two heads whose product is p
            with_sel = float(spst_target_loss(sqrt_p, sqrt_p, onehot, gamma).data)
            beneficial = with_sel < 0.0
            agree += beneficial == (p.max() > threshold_from_gamma(gamma))
        assert agree == 100

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 0.99))
    def test_minimizer_is_certainty(self, q):
        gamma = 0.1
        loss = lambda v: float(spst_target_loss([[1 - v, v]], [[1 - v, v]], [[0.0, 1.0]], gamma).data)  # noqa: E731
        assert loss(min(q + 0.005, 1.0)) < loss(q)


class TestCDMix:
    def test_endpoints(self):
        rng = np.random.default_rng(0)
        s, t = rng.normal(size=(32, 3)), rng.normal(size=(32, 3))
        ps, pt = softmax(rng.normal(size=4)), softmax(rng.normal(size=4))
        one = cdmix(s, t, ps, pt, 2.0, rng, lam=1.0)
        zero = cdmix(s, t, ps, pt, 2.0, rng, lam=0.0)
        assert np.array_equal(one.cloud, s[farthest_point_sample(s, 32)]) and np.array_equal(one.virtual_label, ps)
        assert np.array_equal(zero.cloud, t[farthest_point_sample(t, 32)]) and np.array_equal(zero.virtual_label, pt)

    def test_pairing_by_fps_rank(self):
        rng = np.random.default_rng(1)
        s, t = rng.normal(size=(40, 3)), rng.normal(size=(30, 3))
        out = mix_clouds(s, t, 0.3)
        i, j = farthest_point_sample(s, 30), farthest_point_sample(t, 30)
        assert np.allclose(out, 0.3 * s[i] + 0.7 * t[j], atol=1e-15)

    def test_beta_mean(self):
        rng = np.random.default_rng(2)
        s, t = np.eye(3), -np.eye(3)
        lams = [cdmix(s, t, [1, 0], [0, 1], 2.0, rng).lam for _ in range(10_000)]
        assert abs(np.mean(lams) - 0.5) < 0.02

    def test_virtual_label_on_simplex(self):
        rng = np.random.default_rng(3)
        pair = cdmix(np.eye(3), -np.eye(3), softmax(rng.normal(size=5)), softmax(rng.normal(size=5)), 2.0, rng)
        assert np.all(pair.virtual_label >= 0) and np.isclose(pair.virtual_label.sum(), 1.0)


class TestBoundedLosses:
    def test_mix_examples(self):
        big = 50.0
        assert float(mix_loss(np.array([[big, 0.0]]), [[1.0, 0.0]]).data) < 1e-12
        assert abs(float(mix_loss(np.array([[big, -big]]), [[0.0, 1.0]]).data) - 1.0) < 1e-12

    def test_sim_examples(self):
        z = np.array([[1.0, -2.0, 0.5]])
        assert abs(float(sim_loss(z, z).data)) < 1e-12
        assert abs(float(sim_loss(-z, z).data) - 2.0) < 1e-12
        assert abs(float(sim_loss([[1.0, 0.0]], [[0.0, 3.0]]).data) - 1.0) < 1e-12

    def test_sim_stops_gradient_into_global(self):
        a = ad.DiffValue(np.array([[1.0, 2.0]]), requires_grad=True)
        b = ad.DiffValue(np.array([[0.5, -1.0]]), requires_grad=True)
        sim_loss(a, b).backward()
        assert b.grad is None and np.any(a.grad != 0)

    def test_implicit_examples(self):
        t = np.random.default_rng(0).normal(size=(5, 4))
        assert float(implicit_loss(t, t).data) <= 1e-12  # norm is clamped just above zero
        assert float(implicit_loss(t + [1.0, 0, 0, 0], t).data) == pytest.approx(1.0, abs=1e-12)
        r = np.random.default_rng(1).normal(size=(5, 4))
        assert abs(float(implicit_loss(t + r, t).data) - np.linalg.norm(r, axis=1).mean()) < 1e-12
        with pytest.raises(ValueError):
            implicit_loss(np.zeros((0, 4)), np.zeros((0, 4)))

    @settings(max_examples=200, deadline=None)
    @given(vec)
    def test_ranges(self, x):
        a, b, c = x
        assert -1e-12 <= float(mix_loss(a[None], softmax(b)[None]).data) <= 2 + 1e-12
        assert -1e-12 <= float(sim_loss(a[None], c[None]).data) <= 2 + 1e-12
        assert float(implicit_loss(np.resize(a, (2, 4)), np.resize(c, (2, 4))).data) >= 0


class TestCDC:
    def test_reference_value(self):
        loss, skipped = cdc_loss(np.array([[1.0, 0.0]]), [0], np.array([[2.0, 0.0], [-1.0, 0.0]]), [0, 1], tau=1.0)
        assert abs(float(loss.data) - (-math.log(math.e / (math.e + math.exp(-1))))) < 1e-12
        assert skipped == 0

    def test_no_negatives(self):
        loss, _ = cdc_loss(np.array([[1.0, 0.5]]), [1], np.array([[0.3, 0.1], [-1.0, 2.0]]), [1, 1])
        assert abs(float(loss.data)) < 1e-12

    def test_absent_class_skipped(self):
        loss, skipped = cdc_loss(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 3], np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1])
        ref, _ = cdc_loss(np.array([[1.0, 0.0]]), [0], np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1])
        assert skipped == 1 and float(loss.data) == float(ref.data)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        z, bank = rng.normal(size=(5, 6)), rng.normal(size=(12, 6))
        y, by = rng.integers(0, 3, size=5), np.arange(12) % 3
        cos = lambda u, v: u @ v / np.linalg.norm(u) / np.linalg.norm(v)  # noqa: E731
        num = den = 0.0
        for i in range(5):
            for j in range(12):
                phi = math.exp(cos(z[i], bank[j]) / 0.1)
                den += phi
                num += phi if y[i] == by[j] else 0.0
        assert abs(float(cdc_loss(z, y, bank, by, 0.1)[0].data) + math.log(num / den)) < 1e-10

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-3, 3)), arrays(np.float64, (6, 3), elements=st.floats(-3, 3)),
           st.lists(st.integers(0, 2), min_size=4, max_size=4))
    def test_non_negative(self, z, bank, y):
        loss, _ = cdc_loss(z, y, bank, np.arange(6) % 3)
        assert float(loss.data) >= -1e-12


class TestTotal:
    def test_source_only(self):
        w = LossWeights(target=0, cdc=0, imp=0, mix=0, sim=0)
        terms = {k: 1.0 for k in ("source", "target", "cdc", "imp", "mix", "sim")}
        terms["source"] = 0.7
        assert float(total_loss(terms, w).data) == 0.7

    def test_defaults(self):
        terms = {k: 1.0 for k in ("source", "target", "cdc", "imp", "mix", "sim")}
        assert abs(float(total_loss(terms, LossWeights()).data) - 5.1) < 1e-12

    def test_unknown_term(self):
        with pytest.raises(KeyError):
            total_loss({"bogus": 1.0}, LossWeights())

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(mix=-1)

    def test_gradient_is_weighted_sum(self):
        rng = np.random.default_rng(0)
        w = ad.DiffValue(rng.normal(size=(3, 4)), requires_grad=True)
        x = rng.normal(size=(5, 3))
        weights = LossWeights(mix=0.3, sim=0.7)

        def terms():
            logits = ad.matmul(x, w)
            return {"mix": mix_loss(logits, softmax(rng_fixed)), "sim": sim_loss(logits, z_fixed)}

        rng_fixed = np.random.default_rng(1).normal(size=(5, 4))
        z_fixed = np.random.default_rng(2).normal(size=(5, 4))

        def grad(f):
            w.grad = None
            f().backward()
            return w.grad.copy()

        combined = grad(lambda: total_loss(terms(), weights))
        separate = 0.3 * grad(lambda: terms()["mix"]) + 0.7 * grad(lambda: terms()["sim"])
        assert np.allclose(combined, separate, atol=1e-10)
