import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deidkit import nn, ops, swap
from deidkit import obfuscator as obf
from deidkit.errors import ConfigurationError, DimensionError
from deidkit.world import ExpertModel, build_extractor, penultimate_net


def small_model(nf=6, nz=4, seed=0):
    return swap.make_swap_model(nf, nz, n_nu=3, n_code=5, hidden=4, seed=seed)


def unit(rng, n, d):
    return ops.normalize(rng.normal(size=(n, d)))[0]


def constant_critic(nf, value=0.5, k_d=1):
    # Zero weights and a fixed pre-activation give D == value everywhere.
    critics = swap.make_critics(nf, hidden=3, k_d=k_d)
    for c in critics:
        for W in c.weights:
            W[:] = 0
        c.biases[0][:] = 0
        c.biases[-1][:] = math.log(value / (1 - value))
    return critics


class TestForward:
    @given(st.integers(0, 2**31 - 1))
    def test_pure_and_shaped(self, seed):
        rng = np.random.default_rng(seed)
        m = small_model(seed=seed % 97)
        x, z = rng.normal(size=(3, 6)), unit(rng, 3, 4)
        out = swap.swap_forward(m, x, z)
        assert out.shape == x.shape
        assert np.array_equal(out, swap.swap_forward(m, x, z))
        assert np.array_equal(swap.swap_forward(m, x[0], z[0]), out[0])

    def test_zero_model(self, rng):
        m = small_model()
        for net in m.nets():
            for p in net.params():
                p[:] = 0
        assert np.all(swap.swap_forward(m, rng.normal(size=(2, 6)), unit(rng, 2, 4)) == 0)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            swap.swap_forward(small_model(), rng.normal(size=(2, 5)), unit(rng, 2, 4))
        with pytest.raises(DimensionError):
            swap.swap_forward(small_model(), rng.normal(size=(2, 6)), unit(rng, 2, 3))


class TestLosses:
    def test_mix_examples(self, rng):
        m = small_model()
        x, z, zt = rng.normal(size=(3, 6)), unit(rng, 3, 4), unit(rng, 3, 4)
        assert swap.loss_mix(m, x, z, z) == 0.0
        assert swap.loss_mix(m, x, z, zt) == swap.loss_mix(m, x, zt, z)
        by_hand = np.mean([np.abs(swap.swap_forward(m, x[i], zt[i]) - swap.swap_forward(m, x[i], z[i])).sum() for i in range(3)])
        assert swap.loss_mix(m, x, z, zt) == pytest.approx(by_hand, rel=1e-12)

    def test_gen_constant_critic(self, rng):
        x = rng.normal(size=(4, 6))
        assert swap.loss_gen(constant_critic(6), x, x) == pytest.approx(math.log(0.5))
        assert swap.loss_gen(constant_critic(6, k_d=2), x, x) == pytest.approx(2 * math.log(0.5))
        assert -1e-6 < swap.loss_gen(constant_critic(6, value=1e-7), x, x) < 0

    def test_gen_clamped_at_saturation(self, rng):
        x = rng.normal(size=(2, 6))
        assert np.isfinite(swap.loss_gen(constant_critic(6, value=1 - 1e-15), x, x))

    def test_critic_loss(self, rng):
        x = rng.normal(size=(4, 6))
        assert swap.critic_loss(constant_critic(6), (x, x), (x, x)) == pytest.approx(2 * math.log(2))
        critics = swap.make_critics(6, hidden=3)
        for W in critics[0].weights:
            W[:] = 0
        critics[0].weights[0][0, 0] = 1.0
        critics[0].weights[1][0, 0] = 60.0
        # D is near 1 when x[0] is large and near 0 when the first coordinate is very negative.
        real = np.full((2, 12), 3.0)
        fake = np.full((2, 12), -3.0)
        critics[0].biases[-1][:] = 0.0
        assert swap.critic_loss(critics, (real[:, :6], real[:, 6:]), (fake[:, :6], fake[:, 6:])) < 1e-12

    def test_id_bounds(self, small_world, small_experts, rng):
        ext = build_extractor(small_experts[0], n_z=8, hidden=(8,), seed=1)
        m = swap.make_swap_model(small_world.config.n_feature, 8, n_nu=4, n_code=8, hidden=8)
        x = small_world.train.features[:5]
        z, zt = ext.extract(x), unit(rng, 5, 8)
        assert 0.0 <= swap.loss_id(ext, m, x, z, zt) <= 4.0

    def test_id_examples(self, rng):
        class Oracle:
            def __init__(self, sign):
                self.sign = sign

            def extract(self, x):
                return self.sign * self.z

        m = small_model()
        x, z = rng.normal(size=(2, 6)), unit(rng, 2, 4)
        perfect, opposite = Oracle(1.0), Oracle(-1.0)
        perfect.z = opposite.z = z
        assert swap.loss_id(perfect, m, x, z, z) == pytest.approx(0.0, abs=1e-12)
        assert swap.loss_id(opposite, m, x, z, z) == pytest.approx(4.0)
        ortho = Oracle(1.0)
        ortho.z = np.stack([np.array([-v[1], v[0], 0, 0]) / np.linalg.norm(v[:2]) for v in z])
        z2 = np.column_stack([z[:, :2] / np.linalg.norm(z[:, :2], axis=1, keepdims=True), np.zeros((2, 2))])
        assert swap.loss_id(ortho, m, x, z2, z2) == pytest.approx(2.0)

    def test_uti(self, rng):
        e = ExpertModel(nn.init_network([6, 4, 2], final_activation="linear", seed=1), "utility", np.eye(2))
        x, xt = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        assert swap.loss_uti([e], [2.0], x, x) == 0.0
        assert swap.loss_uti([e], [4.0], x, xt) == pytest.approx(2 * swap.loss_uti([e], [2.0], x, xt))
        W, b = e.net.weights[0], e.net.biases[0]
        by_hand = np.mean([2.0 * np.abs(np.tanh(W @ x[i] + b) - np.tanh(W @ xt[i] + b)).sum() for i in range(3)])
        assert swap.loss_uti([e], [2.0], x, xt) == pytest.approx(by_hand, rel=1e-12)
        assert np.array_equal(nn.predict(penultimate_net(e), x), np.tanh(x @ W.T + b))

    def test_uti_count_mismatch(self, rng):
        e = ExpertModel(nn.init_network([6, 4, 2], seed=1), "utility", np.eye(2))
        with pytest.raises(ConfigurationError):
            swap.loss_uti([e], [1.0, 2.0], np.ones((1, 6)), np.ones((1, 6)))

    def test_weights_validated(self):
        with pytest.raises(ConfigurationError):
            swap.LossWeights(lambda_mix=-1.0)
        with pytest.raises(ConfigurationError):
            swap.LossWeights(lambda_uti=(1.0, -0.5))

    def test_kld_weight(self):
        w = swap.LossWeights(lambda_kld=0.2, kld_reference_dim=512)
        assert w.kld_weight(32) == pytest.approx(3.2)
        assert swap.LossWeights(lambda_kld=0.2, kld_reference_dim=None).kld_weight(32) == 0.2


@pytest.fixture(scope="module")
def parts(small_world, small_experts):
    ident, _, util = small_experts
    ext = build_extractor(ident, n_z=8, hidden=(8,), seed=1)
    nf = small_world.config.n_feature
    model = swap.make_swap_model(nf, 8, n_nu=6, n_code=12, hidden=8, seed=2)
    critics = swap.make_critics(nf, hidden=8, seed=3)
    return ext, model, critics, util


def hashes(nets):
    return [n.param_hash() for n in nets]


class TestPhase1:
    def test_zero_steps(self, small_world, parts):
        ext, model, critics, _ = parts
        m, c = model.copy(), [k.copy() for k in critics]
        trace = swap.train_phase1(m, c, ext, small_world, steps=0)
        assert trace == [] and hashes(m.nets()) == hashes(model.nets())

    def test_deterministic_and_experts_frozen(self, small_world, parts):
        ext, model, critics, _ = parts
        expert_hashes = hashes([e.net for e in ext.experts])
        runs = []
        for _ in range(2):
            m, c = model.copy(), [k.copy() for k in critics]
            e2 = type(ext)(ext.experts, ext.merge_net.copy(), ext.distill)
            runs.append(swap.train_phase1(m, c, e2, small_world, steps=15, seed=4))
        assert runs[0] == runs[1]
        assert hashes([e.net for e in ext.experts]) == expert_hashes

    def test_default_world_reinjection(self, runner, default_cfg):
        pre = runner.pretrained(default_cfg)
        x = runner.world(default_cfg).eval.features
        z = pre.extractor.extract(x)
        back = pre.extractor.extract(swap.swap_forward(pre.model, x, z))
        l_id = float(np.mean(1.0 - ops.cosine(z, back)[0]))
        assert l_id < 0.3


class TestPhase2:
    def run(self, world, parts, spec, weights, steps=10, seed=5):
        ext, model, critics, util = parts
        m, c = model.copy(), [k.copy() for k in critics]
        trace = swap.train_phase2(m, c, spec, ext, util, weights, world, steps=steps, seed=seed)
        return m, trace

    def test_deterministic(self, small_world, parts):
        a = self.run(small_world, parts, obf.make_ved(8, n_v=4, encoder_hidden=(8,), decoder_hidden=(8,)), swap.LossWeights())
        b = self.run(small_world, parts, obf.make_ved(8, n_v=4, encoder_hidden=(8,), decoder_hidden=(8,)), swap.LossWeights())
        assert a[1] == b[1] and hashes(a[0].nets()) == hashes(b[0].nets())

    def test_null_objective(self, small_world, parts):
        zero = swap.LossWeights(0, 0, 0, (0, 0), 0, 0, 0)
        assert zero.all_zero()
        spec = obf.make_mlp(8, hidden=(8,), seed=1)
        before = hashes(spec.nets())
        m, _ = self.run(small_world, parts, spec, zero)
        assert hashes(m.nets()) == hashes(parts[1].nets())
        assert hashes(spec.nets()) == before

    def test_frozen_experts_and_merge(self, small_world, parts, small_experts):
        ext, _, _, util = parts
        watched = [e.net for e in small_experts[0] + small_experts[2]] + [ext.merge_net]
        before = hashes(watched)
        self.run(small_world, parts, obf.make_mlp(8, hidden=(8,), beta=0.5, seed=1), swap.LossWeights())
        assert hashes(watched) == before

    def test_updates_obfuscator(self, small_world, parts):
        spec = obf.make_ved(8, n_v=4, encoder_hidden=(8,), decoder_hidden=(8,))
        before = hashes(spec.nets())
        self.run(small_world, parts, spec, swap.LossWeights())
        assert hashes(spec.nets()) != before

    def test_weight_count_checked(self, small_world, parts):
        with pytest.raises(ConfigurationError):
            self.run(small_world, parts, obf.make_opp(8), swap.LossWeights(lambda_uti=(1.0,)))
