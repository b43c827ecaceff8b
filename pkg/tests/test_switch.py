import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sb2rb import numerics as nx
from sb2rb.channel import Pdp, pdp_metrics
from sb2rb.switch import (C_ITP, C_SRP, METRICS, LearnedSwitchParams, SwitchTrainConfig, decide,
                          gain_cost, learned_switch_forward, line_gain, operating_point,
                          random_switch_curve, switch_objective, threshold_switch, train_switch)


@pytest.fixture
def two_tap():
    return Pdp(np.array([0.5, 0, 0.5, 0, 0, 0, 0, 0]), 1.0)


class TestThreshold:
    @pytest.mark.parametrize("metric", METRICS)
    def test_equality_selects_srpnet(self, two_tap, metric):
        m = pdp_metrics(two_tap).get(metric)
        d = threshold_switch(two_tap, metric, m)
        assert d.s == 1 and d.complexity_charged == C_SRP

    @pytest.mark.parametrize("metric", METRICS)
    def test_delta_pdp_selects_interpolation(self, metric):
        p = np.zeros(8)
        p[3] = 1.0
        d = threshold_switch(Pdp(p, 1.0), metric, 1e-9)
        assert d.s == 0 and d.complexity_charged == C_ITP

    @pytest.mark.parametrize("metric", METRICS)
    def test_zero_threshold(self, two_tap, metric):
        assert threshold_switch(two_tap, metric, 0.0).s == 1

    def test_unknown_metric(self, two_tap):
        with pytest.raises(ValueError):
            threshold_switch(two_tap, "median", 1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 5), min_size=8, max_size=8).filter(lambda v: max(v) > 1e-3),
           st.floats(1e-3, 1e3), st.floats(0, 8), st.sampled_from(METRICS))
    def test_scale_invariance(self, vals, c, thres, metric):
        p = np.array(vals)
        a = threshold_switch(Pdp(p, 1.0), metric, thres).s
        b = threshold_switch(Pdp(p * c, 1.0), metric, thres).s
        m = pdp_metrics(Pdp(p, 1.0)).get(metric)
        if abs(m - thres) > 1e-9:      # away from the boundary rounding cannot flip the decision
            assert a == b


class TestLearned:
    def test_zero_params_round_half_up(self):
        d = learned_switch_forward(np.ones(6), LearnedSwitchParams(np.zeros(6), 0.0, 0.0))
        assert d.s_soft == 0.5 and d.s == 1

    def test_saturated_bias(self):
        rng = np.random.default_rng(0)
        params = LearnedSwitchParams(rng.standard_normal(6), 50.0, 0.0)
        for _ in range(20):
            assert learned_switch_forward(rng.uniform(0, 1, 6) + 1e-3, params).s == 1

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(1e-3, 5), min_size=6, max_size=6), st.floats(1e-3, 1e3))
    def test_power_invariance(self, vals, c):
        params = LearnedSwitchParams(np.array([3.0, -1.0, 0.5, 2.0, -4.0, 1.0]), -0.2, 0.0)
        p = np.array(vals)
        a, b = learned_switch_forward(p, params), learned_switch_forward(p * c, params)
        assert a.s_soft == pytest.approx(b.s_soft, abs=1e-12)

    def test_decide_matches_forward(self):
        rng = np.random.default_rng(1)
        params = LearnedSwitchParams(rng.standard_normal(5), 0.1, 0.0)
        x = rng.uniform(0, 1, (30, 5))
        np.testing.assert_array_equal(decide(x, params), [learned_switch_forward(r, params).s for r in x])

    def test_shape_mismatch(self):
        with pytest.raises(nx.ShapeError):
            learned_switch_forward(np.ones(4), LearnedSwitchParams(np.zeros(5), 0.0, 0.0))


class TestCost:
    def test_endpoints(self):
        assert gain_cost(1.0, 0.9, 0.7) == (0.9, 1000.0)
        assert gain_cost(0.0, 0.9, 0.7) == (0.7, 1.0)

    def test_midpoint(self):
        assert gain_cost(0.5, 0.9, 0.7)[1] == 500.5

    def test_random_curve_endpoints_and_linearity(self):
        rng = np.random.default_rng(2)
        gs, gi = rng.uniform(0.8, 1, 50), rng.uniform(0.6, 0.9, 50)
        curve = random_switch_curve(gs, gi, np.linspace(0, 1, 11))
        assert curve[0][1:] == operating_point(np.zeros(50), gs, gi)
        assert curve[-1][1:] == pytest.approx(operating_point(np.ones(50), gs, gi), abs=1e-15)
        c = np.array([r[1] for r in curve])
        g = np.array([r[2] for r in curve])
        np.testing.assert_allclose(np.diff(c, 2), 0, atol=1e-9)
        np.testing.assert_allclose(np.diff(g, 2), 0, atol=1e-15)
        for cc, gg in zip(c, g):
            assert line_gain(cc, gs, gi) == pytest.approx(gg, abs=1e-12)

    def test_objective_gradient(self):
        rng = np.random.default_rng(3)
        x = rng.dirichlet(np.ones(6), 20)
        gs, gi = rng.uniform(0.8, 1, 20), rng.uniform(0.6, 0.9, 20)
        fn = lambda f, b: switch_objective(f, b, x, gs, gi, 1e-4)
        rep = nx.grad_check(fn, [nx.Tensor(rng.standard_normal(6)), nx.Tensor(rng.standard_normal(1))])
        assert rep.passed, rep.message


def synthetic_switch_data(n, n_bins, seed):
    """Wide PDPs gain from SRPNet, narrow ones do not."""
    rng = np.random.default_rng(seed)
    width = rng.integers(1, n_bins, n)
    pdps = np.array([np.exp(-np.arange(n_bins) / w) for w in width])
    gi = 0.95 - 0.3 * width / n_bins + 0.01 * rng.standard_normal(n)
    gs = np.minimum(gi + 0.2 * width / n_bins + 0.01, 1.0)
    return pdps, gs, gi


@pytest.fixture(scope="module")
def data():
    return synthetic_switch_data(200, 16, 0), synthetic_switch_data(100, 16, 1)


class TestTraining:
    def test_free_srpnet(self, data):
        train, val = data
        p = train_switch(train, val, 0.0, SwitchTrainConfig(iters=200))
        assert np.mean(decide(val[0], p)) >= 0.99

    def test_expensive_srpnet(self, data):
        train, val = data
        p = train_switch(train, val, 1.0, SwitchTrainConfig(iters=200))
        assert np.mean(decide(val[0], p)) <= 0.01

    def test_complexity_monotone_in_lambda(self, data):
        train, val = data
        comp = []
        for lam in (1e-5, 5e-5, 1e-4, 5e-4, 1e-3):
            p = train_switch(train, val, lam, SwitchTrainConfig(iters=400))
            comp.append(operating_point(decide(val[0], p), val[1], val[2])[0])
        assert all(a >= b for a, b in zip(comp, comp[1:]))
        assert comp[0] > comp[-1]

    def test_params_round_trip(self):
        p = LearnedSwitchParams(np.arange(4.0), -0.5, 1e-4)
        q = LearnedSwitchParams.from_tensors(p.to_tensors(), 1e-4)
        np.testing.assert_array_equal(q.f, p.f)
        assert q.b == p.b

    def test_bad_inputs(self, data):
        train, val = data
        with pytest.raises(ValueError):
            train_switch(train, val, -1.0)
        with pytest.raises(ValueError):
            train_switch(train, (val[0][:0], val[1][:0], val[2][:0]), 0.0)
