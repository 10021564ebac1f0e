import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from abstop.conjugate import (
    GaussianSummary, Group, GroupPrior, HorizonError, NoiseModel, SampleSchedule, ScheduleError, StateError,
    coeff_table, delta_posterior, posterior_mean, predictive_next, prob_positive, sample_transition,
    state_delta_posterior, weight_coeffs,
)
from abstop.env import BeliefState
from abstop.rng import stream

from conftest import grid_bayes, small_context

T, C = Group.TREATMENT, Group.CONTROL


def sched(counts):
    return SampleSchedule(tuple(counts), tuple(counts))


def per_customer_cumulative_mean(counts, l, mu, sigma, n_rep, rng):
    """Simulate every customer's weekly outcomes and average their cumulative sums."""
    entry = np.repeat(np.arange(1, l + 1), counts[:l])
    weeks_in = l - entry + 1
    out = np.empty(n_rep)
    for r in range(n_rep):
        y = mu + sigma * rng.standard_normal((len(entry), l))
        mask = np.arange(l)[None, :] < weeks_in[:, None]
        out[r] = np.sum(y * mask) / len(entry)
    return out


class TestWeightCoeffs:
    def test_single_week(self):
        k = weight_coeffs(sched([10]), T, 1)
        assert (k.c, k.a, k.b) == (10, 1, 0.1)

    def test_two_weeks(self):
        k = weight_coeffs(sched([10, 20]), T, 2)
        assert k.c == 40
        assert k.a == pytest.approx(4 / 3)
        assert k.b == pytest.approx(40 / 900)

    def test_zero_second_week(self):
        k = weight_coeffs(sched([5, 0]), T, 2)
        assert (k.c, k.a, k.b) == (10, 2, 0.4)

    @pytest.mark.parametrize("counts,l", [([10, 20], 2), ([5, 0], 2), ([7, 3, 9], 3)])
    def test_matches_per_customer_simulation(self, counts, l):
        rng = np.random.default_rng(5)
        k = weight_coeffs(sched(counts), T, l)
        w = per_customer_cumulative_mean(counts, l, 0.7, 2.0, 4000, rng)
        se_mean = w.std(ddof=1) / math.sqrt(len(w))
        assert abs(w.mean() - 0.7 * k.a) < 4 * se_mean
        var = w.var(ddof=1)
        assert abs(var - 4.0 * k.b) < 4 * var * math.sqrt(2 / (len(w) - 1))

    def test_range_errors(self):
        with pytest.raises(ScheduleError):
            weight_coeffs(sched([1, 2]), T, 3)
        with pytest.raises(ScheduleError):
            weight_coeffs(sched([1, 2]), T, 0)
        with pytest.raises(ScheduleError):
            SampleSchedule((0, 3), (1, 1))

    @given(st.lists(st.integers(0, 50), min_size=1, max_size=6), st.integers(1, 50))
    def test_identities(self, tail, first):
        counts = [first] + tail
        s = sched(counts)
        a, b, c, cum = coeff_table(counts)
        for l in range(1, len(counts) + 1):
            k = weight_coeffs(s, T, l)
            assert k.a**2 / k.b == pytest.approx(k.c, rel=1e-12)
            n = sum(counts[:l])
            assert k.c >= n
            if l == 1:
                assert k.c == n
            assert (a[l - 1], b[l - 1], c[l - 1]) == pytest.approx((k.a, k.b, k.c), rel=1e-12)


class TestPosterior:
    def test_dogmatic_prior(self):
        p = posterior_mean(GroupPrior(0.3, 1e-9), NoiseModel(1.0), 5.0, weight_coeffs(sched([100]), T, 1))
        assert p.mean == pytest.approx(0.3, abs=1e-9)
        assert p.variance == pytest.approx(1e-18, rel=1e-6)

    def test_worked_example(self):
        p = posterior_mean(GroupPrior(0.0, 1.0), NoiseModel(1.0), 0.5, weight_coeffs(sched([100]), T, 1))
        assert p.mean == pytest.approx(50 / 101, rel=1e-12)
        assert p.variance == pytest.approx(1 / 101, rel=1e-12)

    def test_large_noise_regime_against_grid(self):
        k = weight_coeffs(sched([1000]), T, 1)
        p = posterior_mean(GroupPrior(0.1, 2.0), NoiseModel(100.0), 0.0, k)
        m, v = grid_bayes(0.1, 2.0, 100.0, k.a, k.b, 0.0)
        assert p.mean == pytest.approx(m, rel=1e-6)
        assert p.variance == pytest.approx(v, rel=1e-6)

    def test_rejects_bad_scales(self):
        k = weight_coeffs(sched([10]), T, 1)
        with pytest.raises(ValueError):
            posterior_mean(GroupPrior(0.0, 0.0), NoiseModel(1.0), 0.0, k)
        with pytest.raises(ValueError):
            posterior_mean(GroupPrior(0.0, 1.0), NoiseModel(-1.0), 0.0, k)

    @given(st.floats(0.05, 5), st.floats(0.1, 50), st.lists(st.integers(1, 60), min_size=1, max_size=4),
           st.floats(-3, 3))
    def test_precision_additivity(self, s0, s, counts, w):
        k = weight_coeffs(sched(counts), T, len(counts))
        p = posterior_mean(GroupPrior(0.0, s0), NoiseModel(s), w, k)
        assert p.variance <= min(s0**2, s**2 * k.b / k.a**2) * (1 + 1e-12)


class TestPredictive:
    def test_no_new_customers(self):
        p = predictive_next(NoiseModel(2.0), 0.0, 0.8, sched([10, 0]), T, 1)
        assert p.mean == 0.8
        assert p.variance == pytest.approx(4.0 / 10)

    def test_dilution(self):
        p = predictive_next(NoiseModel(3.0), 0.0, 1.0, sched([10, 20]), T, 1)
        assert p.mean == pytest.approx(1 / 3)
        assert p.variance == pytest.approx(9.0 / 30)

    def test_one_more_week(self):
        p = predictive_next(NoiseModel(3.0), 1.0, 0.0, sched([50, 0]), T, 1)
        assert p.mean == 1.0
        assert p.variance == pytest.approx(9.0 / 50)

    def test_matches_per_customer_simulation(self):
        mu, sigma = 0.4, 1.5
        rng = np.random.default_rng(11)
        w1, w2 = [], []
        for _ in range(20000):
            y = mu + sigma * rng.standard_normal((30, 2))
            w1.append(y[:10, 0].sum() / 10)
            w2.append((y[:10].sum() + y[10:, 1].sum()) / 30)
        w1, w2 = np.array(w1), np.array(w2)
        # regress W2 on W1: slope N_1/N_{1:2}, residual variance sigma^2/N_{1:2}
        resid = w2 - (w1 * 10 + mu * 30) / 30
        assert abs(resid.mean()) < 4 * resid.std() / math.sqrt(len(resid))
        assert resid.var() == pytest.approx(sigma**2 / 30, rel=0.05)

    def test_horizon_error(self):
        with pytest.raises(HorizonError):
            predictive_next(NoiseModel(1.0), 0.0, 0.0, sched([1, 2]), T, 2)


class TestDelta:
    def test_identical(self):
        g = GaussianSummary(0.4, 0.2)
        d = delta_posterior(g, g)
        assert d.mean == 0 and d.variance == pytest.approx(0.4)

    def test_substitution(self):
        d = delta_posterior(GaussianSummary(0.5, 0.01), GaussianSummary(0.2, 0.04))
        assert d.mean == pytest.approx(0.3) and d.variance == pytest.approx(0.05)

    def test_joint_grid_oracle(self):
        ctx = small_context(n_tr=(12, 5, 3, 1), n_c=(9, 4, 2, 2), sigma0_tr=0.8, sigma0_c=0.6)
        state = BeliefState(0.9, -0.2, 2)
        d = state_delta_posterior(state, ctx)
        # two-dimensional grid over (mu_tr, mu_c)
        k_tr, k_c = weight_coeffs(ctx.schedule, T, 2), weight_coeffs(ctx.schedule, C, 2)
        g = np.linspace(-6, 6, 3001)
        mt, mc = np.meshgrid(g, g, indexing="ij")
        logp = (-0.5 * ((mt - ctx.mu0_tr) / ctx.sigma0_tr) ** 2 - 0.5 * ((mc - ctx.mu0_c) / ctx.sigma0_c) ** 2
                - 0.5 * (state.w_tr - k_tr.a * mt) ** 2 / (ctx.sigma_tr**2 * k_tr.b)
                - 0.5 * (state.w_c - k_c.a * mc) ** 2 / (ctx.sigma_c**2 * k_c.b))
        p = np.exp(logp - logp.max())
        p /= p.sum()
        dm = np.sum((mt - mc) * p)
        dv = np.sum((mt - mc - dm) ** 2 * p)
        assert d.mean == pytest.approx(dm, rel=1e-6)
        assert d.variance == pytest.approx(dv, rel=1e-6)

    def test_prob_positive(self):
        assert prob_positive(GaussianSummary(0.0, 1.0)) == 0.5
        assert prob_positive(GaussianSummary(1.6449, 1.0)) == pytest.approx(0.95, abs=1e-4)
        assert prob_positive(GaussianSummary(-3.0, 0.0)) == 0.0
        assert prob_positive(GaussianSummary(2.0, 0.0)) == 1.0
        assert prob_positive(GaussianSummary(0.0, 0.0)) == 0.5


class TestTransition:
    def test_degenerate_noise_is_deterministic(self):
        ctx = small_context(sigma0_tr=1e-12, sigma0_c=1e-12, sigma_tr=1e-12, sigma_c=1e-12)
        s = BeliefState(ctx.mu0_tr, ctx.mu0_c, 1)
        nxt = sample_transition(s, ctx, stream(0, "t"))
        n1, n2 = ctx.n_tr[0], ctx.n_tr[0] + ctx.n_tr[1]
        assert nxt.w_tr == pytest.approx((s.w_tr * n1 + ctx.mu0_tr * n2) / n2, abs=1e-6)
        assert nxt.week == 2 and not nxt.terminated

    def test_seeded_repeatability(self, ctx):
        s = BeliefState(0.3, 0.1, 2)
        assert sample_transition(s, ctx, stream(4, "t")) == sample_transition(s, ctx, stream(4, "t"))

    def test_errors(self, ctx):
        with pytest.raises(StateError):
            sample_transition(BeliefState(0, 0, 1, True), ctx, stream(0, "t"))
        with pytest.raises(HorizonError):
            sample_transition(BeliefState(0, 0, 4), ctx, stream(0, "t"))

    def test_total_expectation_and_martingale(self, ctx):
        s = BeliefState(0.5, -0.1, 2)
        rng = stream(1, "mc")
        n = 100_000
        w_tr = np.empty(n)
        m_next = np.empty(n)
        for i in range(n):
            nxt = sample_transition(s, ctx, rng)
            w_tr[i] = nxt.w_tr
            m_next[i] = state_delta_posterior(nxt, ctx).mean
        post = posterior_mean(ctx.prior(T), ctx.noise(T), s.w_tr, weight_coeffs(ctx.schedule, T, 2))
        n2, n3 = ctx.schedule.cumulative(T, 2), ctx.schedule.cumulative(T, 3)
        expected = (s.w_tr * n2 + post.mean * n3) / n3
        assert abs(w_tr.mean() - expected) < 4 * w_tr.std() / math.sqrt(n)
        m_now = state_delta_posterior(s, ctx).mean
        assert abs(m_next.mean() - m_now) < 4 * m_next.std() / math.sqrt(n)
