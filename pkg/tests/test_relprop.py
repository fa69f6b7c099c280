import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from eventrpg.relprop import (
    RelPropConfig,
    gamma,
    init_relevance,
    propagate,
    redistribute_in_time,
    relprop_linear_collapsed,
    relprop_linear_step,
    relprop_spiking_slrp,
    relprop_spiking_sltrp,
)
from eventrpg.snn import AvgPool2d, Conv2d, Flatten, Linear, Network, NeuronParams, Spiking, forward
from eventrpg.verify import closed_form_redistribution, prefix_sum_oracle, random_frames, random_network

IF = NeuronParams("IF")


def alpha_beta_oracle(W, x, R, alpha, beta):
    """Alpha-beta rule (``alpha + beta = 1``) for a dense layer, written with explicit loops.

    An output with no positive (negative) contributions hands its alpha
    (beta) share to all inputs equally.
    """
    n_out, n_in = W.shape
    R_in = np.zeros(n_in)
    for j in range(n_out):
        z = [W[j, i] * x[i] for i in range(n_in)]
        zp = sum(v for v in z if v > 0)
        zn = sum(v for v in z if v < 0)
        for i in range(n_in):
            R_in[i] += alpha * R[j] * (z[i] / zp if zp > 0 and z[i] > 0 else 0.0 if zp > 0 else 1 / n_in)
            R_in[i] += beta * R[j] * (z[i] / zn if zn < 0 and z[i] < 0 else 0.0 if zn < 0 else 1 / n_in)
    return R_in


class TestInit:
    def test_clrp_two_classes(self):
        t, c = init_relevance(np.array([[2.0, 0.0]]), 0, "SLTRP")
        np.testing.assert_array_equal(t.values, [[2, 0]])
        np.testing.assert_array_equal(c.values, [[0, 2]])

    def test_zero_logits(self):
        t, c = init_relevance(np.zeros((3, 4)), 2, "SLTRP")
        assert not t.values.any() and not c.values.any()

    def test_single_class_has_empty_contrast(self):
        t, c = init_relevance(np.array([[1.5], [0.5]]), 0, "SLRP")
        np.testing.assert_array_equal(t.values, [1.0])
        assert not c.values.any()

    def test_slrp_uses_time_mean(self):
        t, c = init_relevance(np.array([[1.0, 3.0, 0.0], [3.0, 1.0, 0.0]]), 0, "SLRP")
        np.testing.assert_array_equal(t.values, [2, 0, 0])
        np.testing.assert_array_equal(c.values, [0, 1, 1])

    def test_target_out_of_range(self):
        with pytest.raises(ValueError):
            init_relevance(np.zeros((1, 2)), 2)

    def test_alpha_beta_must_sum_to_one(self):
        with pytest.raises(ValueError):
            RelPropConfig(alpha=2.0, beta=0.0)


class TestLinearStep:
    def test_single_path(self):
        r = relprop_linear_step(Linear(np.array([[2.0]])), np.array([3.0]), np.array([5.0]), RelPropConfig())
        np.testing.assert_array_equal(r, [5.0])

    def test_zero_relevance(self):
        layer = Conv2d(np.random.default_rng(0).normal(size=(2, 1, 2, 2)))
        r = relprop_linear_step(layer, np.ones((1, 3, 3)), np.zeros((2, 2, 2)), RelPropConfig())
        assert r.shape == (1, 3, 3) and not r.any()

    def test_proportional_split(self):
        r = relprop_linear_step(Linear(np.array([[1.0, 1.0]])), np.array([1.0, 3.0]), np.array([4.0]),
                                RelPropConfig())
        np.testing.assert_allclose(r, [1.0, 3.0], rtol=1e-15)

    @pytest.mark.parametrize("alpha", [1.0, 2.0, 1.5])
    def test_matches_textbook_rule(self, alpha):
        rng = np.random.default_rng(int(alpha * 10))
        for _ in range(20):
            W = rng.normal(size=(4, 6))
            x = rng.normal(size=6)
            R = rng.normal(size=4)
            got = relprop_linear_step(Linear(W), x, R, RelPropConfig.from_alpha(alpha))
            np.testing.assert_allclose(got, alpha_beta_oracle(W, x, R, alpha, 1 - alpha), atol=1e-12)

    def test_dead_output_spreads_uniformly(self):
        # z+ = 0 for the only output: its relevance spreads over the two inputs
        r = relprop_linear_step(Linear(np.array([[1.0, 1.0]])), np.zeros(2), np.array([4.0]), RelPropConfig())
        np.testing.assert_array_equal(r, [2.0, 2.0])

    def test_avgpool_splits_by_input(self):
        x = np.arange(4.0).reshape(1, 2, 2)
        r = relprop_linear_step(AvgPool2d(2), x, np.array([[[6.0]]]), RelPropConfig())
        np.testing.assert_allclose(r, x, rtol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            relprop_linear_step(Linear(np.ones((2, 3))), np.ones(3), np.ones(3), RelPropConfig())

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-2, 2)),
           arrays(np.float64, 5, elements=st.floats(-2, 2)),
           arrays(np.float64, 3, elements=st.floats(-5, 5)),
           st.sampled_from([1.0, 2.0]))
    def test_layer_conserves(self, W, x, R, alpha):
        r = relprop_linear_step(Linear(W), x, R, RelPropConfig.from_alpha(alpha))
        assert r.sum() == pytest.approx(R.sum(), abs=1e-9 * (1 + np.abs(R).sum()) * 10)


class TestLinearCollapsed:
    def test_t1_equals_step(self):
        rng = np.random.default_rng(0)
        layer = Conv2d(rng.normal(size=(3, 2, 2, 2)), padding=1)
        x = rng.normal(size=(2, 3, 3))
        R = rng.normal(size=(3, 4, 4))
        cfg = RelPropConfig.from_alpha(2.0)
        a = relprop_linear_step(layer, x, R, cfg)
        b = relprop_linear_collapsed(layer, np.maximum(x, 0), np.minimum(x, 0), R, cfg)
        np.testing.assert_array_equal(a, b)

    def test_zeros(self):
        r = relprop_linear_collapsed(Linear(np.ones((2, 3))), np.ones(3), np.zeros(3), np.zeros(2), RelPropConfig())
        assert not r.any()

    def test_random_4_to_3_over_five_steps(self):
        rng = np.random.default_rng(1)
        layer = Linear(rng.normal(size=(3, 4)))
        x = rng.uniform(0, 1, (5, 4))
        R = rng.normal(size=3)
        r = relprop_linear_collapsed(layer, x.sum(0), np.zeros(4), R, RelPropConfig())
        assert abs(r.sum() - R.sum()) <= 1e-10


class TestGamma:
    def test_zero_voltage(self):
        assert gamma(0.0, 0.0, 0.7, 0.0, IF, RelPropConfig()) == 0.0

    def test_if_half(self):
        assert gamma(0.5, 0.0, 0.5, 0.0, IF, RelPropConfig()) == 0.5

    def test_zero_current_sends_everything_back(self):
        assert gamma(0.3, 0.0, 0.0, 0.0, NeuronParams("LIF"), RelPropConfig()) == 1.0

    def test_negative_terms_use_beta(self):
        cfg = RelPropConfig.from_alpha(2.0)
        # alpha * 0.25 + beta * (-1 / (-1 - 3))
        assert gamma(0.25, -1.0, 0.75, -3.0, IF, cfg) == pytest.approx(2 * 0.25 - 0.25)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 10), st.floats(0, 10), st.floats(1.1, 10))
    @pytest.mark.filterwarnings("ignore:LIF dt/tau")
    def test_alpha_one_stays_in_unit_interval(self, v, i, tau):
        g = gamma(v, 0.0, i, 0.0, NeuronParams("LIF", tau=tau), RelPropConfig())
        assert 0.0 <= g <= 1.0


class TestSpiking:
    def test_t1_is_identity(self):
        R = np.array([[0.3, -2.0]])
        r = relprop_spiking_sltrp(np.zeros((1, 2)), np.array([[1.0, 0.2]]), R, IF, RelPropConfig())
        np.testing.assert_array_equal(r, R)

    def test_hand_iterated_two_steps(self):
        r = relprop_spiking_sltrp(np.array([0.0, 0.5]), np.array([0.7, 0.5]), np.array([1.0, 1.0]),
                                  IF, RelPropConfig())
        np.testing.assert_allclose(r, [1.5, 0.5], rtol=1e-15)
        assert r.sum() == 2.0

    def test_first_step_gamma_forced_to_zero(self):
        # a nonzero v_prev at t=0 must not leak relevance out of the window
        r = relprop_spiking_sltrp(np.array([0.9, 0.5]), np.array([0.1, 0.5]), np.array([1.0, 1.0]),
                                  IF, RelPropConfig())
        assert r.sum() == pytest.approx(2.0, abs=1e-15)

    def test_closed_form_t16(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            g = rng.uniform(0, 1, 16)
            g[0] = 0
            R = rng.normal(size=16)
            np.testing.assert_allclose(redistribute_in_time(g, R), closed_form_redistribution(g, R),
                                       atol=1e-10, rtol=0)

    @settings(max_examples=150, deadline=None)
    @given(st.integers(1, 16).flatmap(lambda T: st.tuples(
        arrays(np.float64, T, elements=st.floats(0, 1)),
        arrays(np.float64, T, elements=st.floats(-3, 3)))))
    def test_prefix_identity(self, seq):
        g, R = seq
        g = g.copy()
        g[0] = 0
        R_in = redistribute_in_time(g, R)
        for k in range(1, len(R)):
            assert abs(R_in[:k].sum() - prefix_sum_oracle(g, R, k)) <= 1e-10
        assert abs(R_in.sum() - R.sum()) <= 1e-10

    def test_vectorised_neurons_independent(self):
        rng = np.random.default_rng(2)
        v = rng.uniform(0, 1, (6, 3))
        v[0] = 0
        i = rng.normal(size=(6, 3))
        R = rng.normal(size=(6, 3))
        whole = relprop_spiking_sltrp(v, i, R, IF, RelPropConfig())
        for n in range(3):
            np.testing.assert_allclose(whole[:, n], relprop_spiking_sltrp(v[:, n], i[:, n], R[:, n], IF,
                                                                           RelPropConfig()), atol=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            relprop_spiking_sltrp(np.zeros(3), np.zeros(2), np.zeros(3), IF, RelPropConfig())

    def test_slrp_identity(self):
        R = np.random.default_rng(0).normal(size=(3, 4))
        assert relprop_spiking_slrp(R) is R
        assert not relprop_spiking_slrp(np.zeros(3)).any()


def _conv_spike_linear(seed):
    rng = np.random.default_rng(seed)
    return Network([Conv2d(rng.normal(0.4, 0.5, (3, 2, 3, 3)), padding=1), Spiking(NeuronParams("LIF", tau=3.0)),
                    AvgPool2d(2), Flatten(), Linear(rng.normal(0, 0.5, (4, 12)))], (2, 4, 4), 4)


class TestPropagate:
    def test_single_linear_t1_is_plain_lrp(self):
        rng = np.random.default_rng(0)
        W = rng.normal(size=(3, 4))
        net = Network([Flatten(), Linear(W)], (1, 2, 2), 3)
        frames = rng.uniform(0, 2, (1, 1, 2, 2))
        logits, trace = forward(net, frames)
        for mode in ("SLTRP", "SLRP"):
            rel = propagate(net, trace, 1, RelPropConfig(mode=mode, contrastive=False))
            R0 = np.zeros(3)
            R0[1] = logits[0, 1]
            expected = alpha_beta_oracle(W, frames.ravel(), R0, 1.0, 0.0)
            np.testing.assert_allclose(rel.input_target.values.reshape(-1), expected, atol=1e-12)

    @pytest.mark.parametrize("mode", ["SLTRP", "SLRP"])
    @pytest.mark.parametrize("seed", range(4))
    def test_conv_spike_linear_conserves(self, mode, seed):
        net = _conv_spike_linear(seed)
        frames = np.random.default_rng(seed).poisson(1.0, (5, 2, 4, 4)).astype(float)
        _, trace = forward(net, frames)
        rel = propagate(net, trace, 0, RelPropConfig(mode=mode))
        for passes in (rel.target, rel.contrast):
            total = passes[-1].total()
            for r in passes:
                assert abs(r.total() - total) <= 1e-5 * abs(total) + 1e-12

    def test_shapes_follow_mode(self):
        net = _conv_spike_linear(0)
        _, trace = forward(net, np.ones((3, 2, 4, 4)))
        sltrp = propagate(net, trace, 0, RelPropConfig(mode="sltrp"))
        slrp = propagate(net, trace, 0, RelPropConfig(mode="slrp"))
        assert sltrp.input_target.values.shape == (3, 2, 4, 4)
        assert slrp.input_target.values.shape == (2, 4, 4)
        assert len(sltrp.target) == len(net.layers) + 1

    def test_random_networks_conserve_with_alpha_two(self):
        rng = np.random.default_rng(11)
        for _ in range(15):
            net = random_network(rng)
            frames = random_frames(rng, net, int(rng.choice([1, 4, 8])))
            _, trace = forward(net, frames)
            rel = propagate(net, trace, 0, RelPropConfig.from_alpha(2.0, mode="SLTRP"))
            total = rel.target[-1].total()
            for r in rel.target:
                assert abs(r.total() - total) <= 1e-5 * abs(total) + 1e-12
