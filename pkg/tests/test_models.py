import numpy as np
import pytest

from oracles import pearson
from tam import autodiff as ad
from tam.implicit import ImplicitConfig, make_parts, sample_query_points
from tam.losses import implicit_loss
from tam.models import ModelBundle, ModelConfig, max_relative_conv
from tam.posenc import PosEncConfig, encode_global_batch

SMALL = ModelConfig(global_dim=192, d=16, proj_hidden=32, cls_hidden=(16, 8), edge_widths=(8, 16),
                    dec_hidden=(16, 8), pcg_hidden=16)
PE = PosEncConfig(d0=12)


@pytest.fixture
def bundle():
    return ModelBundle(SMALL, seed=0, posenc=PE).eval()


def rand_parts(rng, P=6, k=16):
    return rng.normal(size=(P, k, 3)) * 0.1


class TestShapes:
    def test_heads(self, bundle):
        rng = np.random.default_rng(0)
        out = bundle.forward_reg_cloud(rng.normal(size=(128, 3)))
        assert out.logits.shape == (1, 4) and out.z.shape == (1, 16)
        zc = bundle.local_encode(rand_parts(rng))
        assert zc.shape == (6, 16)
        assert bundle.decode_implicit(zc, rng.normal(size=(6, 3))).shape == (6, 4)
        zc, head = bundle.forward_parts(rng.normal(size=(2, 5, 16, 3)))
        assert zc.shape == (10, 16) and head.logits.shape == (2, 4)

    def test_parameter_prefixes(self, bundle):
        tops = {name.split(".")[0] for name, _ in bundle.named_params()}
        assert tops == {"proj", "cls_reg", "local", "dec", "pcg", "cls_pcg"}

    def test_part_too_small(self, bundle):
        with pytest.raises(ValueError):
            bundle.local_encode(np.zeros((2, 4, 3)))

    def test_single_node_graph(self, bundle):
        with pytest.raises(ValueError):
            bundle.pcg_forward(ad.DiffValue(np.ones((1, 1, 16))))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            ModelBundle(ModelConfig(edge_widths=(32, 48)))


class TestInvariance:
    def test_reg_path_permutation(self, bundle):
        rng = np.random.default_rng(1)
        for _ in range(10):
            c = rng.normal(size=(128, 3))
            a = bundle.forward_reg_cloud(c).logits.data
            b = bundle.forward_reg_cloud(c[rng.permutation(128)]).logits.data
            assert np.max(np.abs(a - b)) < 1e-6

    def test_local_encoder_member_permutation(self, bundle):
        rng = np.random.default_rng(2)
        parts = rand_parts(rng)
        perm = rng.permutation(16)
        a = bundle.local_encode(parts).data
        b = bundle.local_encode(parts[:, perm]).data
        assert np.max(np.abs(a - b)) < 1e-6

    def test_translation_removed_by_centering(self, bundle):
        rng = np.random.default_rng(3)
        cloud = rng.normal(size=(200, 3))
        q = [rng.normal(size=3)]
        a = bundle.local_encode(np.stack([p.coords for p in make_parts(cloud, q, 16)])).data
        b = bundle.local_encode(np.stack([p.coords for p in make_parts(cloud + 2.0, [q[0] + 2.0], 16)])).data
        assert np.allclose(a, b, atol=1e-9)

    def test_pcg_node_permutation(self, bundle):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(1, 8, 16))
        a = bundle.pcg_forward(z).z.data
        b = bundle.pcg_forward(z[:, rng.permutation(8)]).z.data
        assert np.max(np.abs(a - b)) < 1e-6

    def test_eval_mode_is_deterministic(self, bundle):
        rng = np.random.default_rng(5)
        g = rng.normal(size=(3, 192))
        assert np.array_equal(bundle.forward_reg(g).logits.data, bundle.forward_reg(g).logits.data)


class TestMaxRelativeConv:
    def test_self_loop_identity(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(1, 3))
        Wu = rng.normal(size=(6, 2))
        out = max_relative_conv(z, [[]], np.eye(3), Wu)
        assert np.allclose(out.data, np.concatenate([z, np.zeros((1, 3))], axis=1) @ Wu)

    def test_two_nodes_by_hand(self):
        z = np.array([[1.0, 2.0], [3.0, -1.0]])
        nbrs = [[0, 1], [0, 1]]
        # node 0: max((1,2)-(1,2), (3,-1)-(1,2)) = (2, 0); node 1: max((-2,3), (0,0)) = (0, 3)
        expect = np.array([[1, 2, 2, 0], [3, -1, 0, 3]], dtype=float)
        assert np.allclose(max_relative_conv(z, nbrs, np.eye(2), np.eye(4)).data, expect)

    def test_neighbor_order_irrelevant(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(5, 4))
        Wa, Wu = rng.normal(size=(4, 4)), rng.normal(size=(8, 3))
        a = max_relative_conv(z, [[1, 2, 3], [0, 4], [], [2], [0, 1, 2, 3]], Wa, Wu).data
        b = max_relative_conv(z, [[3, 1, 2], [4, 0], [], [2], [3, 2, 1, 0]], Wa, Wu).data
        assert np.array_equal(a, b)

    def test_identical_nodes_reduce_to_single_node(self, bundle):
        row = np.random.default_rng(2).normal(size=16)
        many = bundle.pcg_forward(np.tile(row, (1, 6, 1))).z.data
        two = bundle.pcg_forward(np.tile(row, (1, 2, 1))).z.data
        assert np.allclose(many, two, atol=1e-12)


class TestGradients:
    def test_pcg_path(self):
        bundle = ModelBundle(SMALL, seed=1, posenc=PE).eval()
        rng = np.random.default_rng(3)
        z = rng.normal(size=(2, 5, 16))
        r = rng.normal(size=(2, 4))
        keys = [k for k in bundle.params if k.startswith(("pcg.", "cls_pcg."))]
        params = ad.ParamSet({k: bundle.params[k] for k in keys})
        assert ad.grad_check(lambda: ad.sum(bundle.pcg_forward(z).logits * r), params) < 1e-4

    def test_decoder_under_implicit_loss(self):
        bundle = ModelBundle(SMALL, seed=2, posenc=PE)
        rng = np.random.default_rng(4)
        zc, c, target = rng.normal(size=(7, 16)), rng.normal(size=(7, 3)), rng.normal(size=(7, 4))
        params = ad.ParamSet({k: v for k, v in bundle.params.items() if k.startswith("dec.")})
        assert ad.grad_check(lambda: implicit_loss(bundle.decode_implicit(zc, c), target), params) < 1e-4


class TestStateDict:
    def test_round_trip(self, tmp_path):
        a = ModelBundle(SMALL, seed=0, posenc=PE)
        a.forward_reg(np.random.default_rng(0).normal(size=(4, 192)))  # moves running statistics
        a.round_to_f32()
        ad.save_checkpoint(tmp_path / "m.tamw", a.state_dict())
        b = ModelBundle(SMALL, seed=9, posenc=PE)
        b.load_state_dict(ad.load_checkpoint(tmp_path / "m.tamw"))
        g = np.random.default_rng(1).normal(size=(3, 192))
        assert np.array_equal(a.eval().forward_reg(g).logits.data, b.eval().forward_reg(g).logits.data)

    def test_missing_and_unknown_keys(self):
        a = ModelBundle(SMALL, seed=0, posenc=PE)
        state = a.state_dict()
        with pytest.raises(KeyError):
            a.load_state_dict({k: v for k, v in state.items() if k != "proj.fc0.W"})
        with pytest.raises(KeyError):
            a.load_state_dict({**state, "extra": np.zeros(1)})


def test_untrained_model_is_near_chance():
    from tam.geometry import SynthConfig, generate_domain

    samples = generate_domain(SynthConfig(points_per_cloud=128, samples_per_class=50), "source")
    feats = encode_global_batch(np.stack([s.cloud for s in samples]), PE)
    y = np.array([s.label for s in samples])
    accs = []
    for seed in range(5):
        pred = ModelBundle(SMALL, seed=seed, posenc=PE).eval().forward_reg(feats).logits.data.argmax(1)
        accs.append((pred == y).mean())
    assert abs(np.mean(accs) - 0.25) <= 0.10


def _plane_data(rng, n_clouds):
    # gently tilted planes at random heights; queries near the rim are dropped so the
    # nearest surface point is on the plane rather than on its boundary
    cfg = ImplicitConfig(l=8, d_lower=0.02, d_upper=0.2, n_query=64)
    parts, queries, targets = [], [], []
    for _ in range(n_clouds):
        g = rng.uniform(-1, 1, size=(600, 2))
        cloud = np.column_stack([g, g @ (rng.normal(size=2) * 0.1) + rng.uniform(-0.5, 0.5)])
        for s in sample_query_points(cloud, cfg, int(rng.integers(1 << 30))):
            if np.abs(s.c[:2]).max() <= 0.6:
                parts.append(make_parts(cloud, [s.c], 16)[0].coords)
                queries.append(s.c)
                targets.append(s.target)
    return np.array(parts), np.array(queries), np.array(targets)


def test_decoder_learns_distance_on_planes():
    rng = np.random.default_rng(0)
    tr_p, tr_q, tr_t = _plane_data(rng, 100)
    te_p, te_q, te_t = _plane_data(rng, 10)
    bundle = ModelBundle(ModelConfig(global_dim=192, d=32, edge_widths=(16, 32), dec_hidden=(64, 32)), seed=0, posenc=PE)
    params = ad.ParamSet({k: v for k, v in bundle.params.items() if k.startswith(("local.", "dec."))})
    opt = ad.Adam(params)
    steps = 1000
    for it in range(steps):
        idx = rng.choice(len(tr_p), size=64, replace=False)
        params.zero_grad()
        loss = implicit_loss(bundle.decode_implicit(bundle.local_encode(tr_p[idx]), tr_q[idx]), tr_t[idx])
        loss.backward()
        opt.step(lr=ad.cosine_lr(3e-3, it, steps))
    bundle.eval()
    pred = bundle.decode_implicit(bundle.local_encode(te_p), te_q).data
    assert pearson(pred[:, 3], te_t[:, 3]) > 0.8

    flat = np.column_stack([rng.uniform(-0.2, 0.2, size=(16, 2)), np.zeros(16)])
    corner = np.abs(rng.uniform(-0.2, 0.2, size=(16, 3)))
    corner[np.arange(16), np.arange(16) % 3] = 0.0  # spread over the three faces of a cube corner
    z = bundle.local_encode(np.stack([flat, corner])).data
    assert ad.cosine_similarity(z[0], z[1]).data < 0.99
