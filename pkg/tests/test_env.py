import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from abstop.conjugate import Group, state_delta_posterior
from abstop.env import (
    Action, BeliefState, ContractError, ExperimentContext, TrueEffect, action_space, initial_state, launch_impact,
    reward, step, trajectory_utility, true_reward,
)
from abstop.rng import stream

from conftest import small_context


def ctx_with(**kw):
    return small_context(**kw)


class TestActionSpace:
    def test_interior_and_horizon(self):
        assert action_space(1, 4) == set(Action)
        assert action_space(4, 4) == {Action.STOP_LAUNCH, Action.STOP_NO_LAUNCH}
        assert action_space(3, 3) == {Action.STOP_LAUNCH, Action.STOP_NO_LAUNCH}

    @pytest.mark.parametrize("week", [0, 5])
    def test_out_of_range(self, week):
        with pytest.raises(ContractError):
            action_space(week, 4)

    def test_encoding(self):
        assert [int(a) for a in Action] == [0, 1, 2]


class TestRewards:
    def test_launch_impact(self):
        ctx = ctx_with(n_tr=(125,) * 4, n_c=(125,) * 4)
        assert launch_impact(0.0, ctx, 2) == 0
        assert launch_impact(0.1, ctx, 2) == pytest.approx(5400)
        assert launch_impact(0.1, ctx, 3) == pytest.approx(5300)

    def test_terminated_pays_nothing(self, ctx):
        assert reward(BeliefState(3.0, 0.0, 2, True), Action.STOP_LAUNCH, ctx) == 0.0

    def test_continue_substitution(self):
        # find the treatment mean that makes the posterior mean effect exactly 0.1
        ctx = ctx_with(weekly_cost=2.0, n_tr=(30, 20, 10, 10), mu0_tr=0.0, mu0_c=0.0)
        s0, s1 = BeliefState(0.0, 0.0, 1), BeliefState(1.0, 0.0, 1)
        slope = state_delta_posterior(s1, ctx).mean - state_delta_posterior(s0, ctx).mean
        s = BeliefState(0.1 / slope, 0.0, 1)
        assert state_delta_posterior(s, ctx).mean == pytest.approx(0.1)
        assert reward(s, Action.CONTINUE, ctx) == pytest.approx(-2.0 + 0.1 * 50)

    def test_launch_substitution(self):
        ctx = ctx_with(n_tr=(125,) * 4, n_c=(125,) * 4, hurdle_cost=100.0)
        assert true_reward(BeliefState(0, 0, 2), Action.STOP_LAUNCH, ctx, TrueEffect(0.1, 0.0)) == pytest.approx(5300)

    def test_illegal_action(self, ctx):
        with pytest.raises(ContractError):
            reward(BeliefState(0.0, 0.0, 4), Action.CONTINUE, ctx)

    @given(st.floats(0.01, 5), st.integers(1, 3))
    def test_launch_monotone_in_week(self, d, t):
        ctx = small_context()
        up, down = TrueEffect(d, 0.0), TrueEffect(-d, 0.0)
        s, s_next = BeliefState(0, 0, t), BeliefState(0, 0, t + 1)
        assert true_reward(s, Action.STOP_LAUNCH, ctx, up) > true_reward(s_next, Action.STOP_LAUNCH, ctx, up)
        assert true_reward(s, Action.STOP_LAUNCH, ctx, down) < true_reward(s_next, Action.STOP_LAUNCH, ctx, down)


class TestStep:
    def test_stop_no_launch(self, ctx):
        out = step(BeliefState(0.2, 0.1, 2), Action.STOP_NO_LAUNCH, ctx, stream(0, "s"))
        assert out.next.terminated and out.reward == 0.0
        assert (out.next.w_tr, out.next.w_c) == (0.2, 0.1)

    def test_continue_into_horizon(self, ctx):
        out = step(BeliefState(0.2, 0.1, 3), Action.CONTINUE, ctx, stream(0, "s"))
        assert out.next.week == 4 and not out.next.terminated

    def test_absorbing(self, ctx):
        s = BeliefState(0.2, 0.1, 2, True)
        for a in (Action.CONTINUE, Action.STOP_LAUNCH):
            out = step(s, a, ctx, stream(0, "s"))
            assert out.next == s and out.reward == 0.0

    def test_continue_reward_is_deterministic(self, ctx):
        s = BeliefState(0.4, 0.1, 2)
        rng = stream(3, "s")
        rewards = {step(s, Action.CONTINUE, ctx, rng).reward for _ in range(2000)}
        assert rewards == {reward(s, Action.CONTINUE, ctx)}


def enumerate_trajectories(ctx, rng):
    """Every legal action sequence of length T, with the states it visits."""
    T = ctx.horizon_t
    spaces = [sorted(action_space(t, T)) for t in range(1, T + 1)]
    start = initial_state(ctx, rng)
    w = [start]
    while w[-1].week < T:
        w.append(step(w[-1], Action.CONTINUE, ctx, rng).next)
    for seq in itertools.product(*spaces):
        traj, state = [], w[0]
        for t, a in enumerate(seq):
            traj.append((state, a))
            if state.terminated or a is not Action.CONTINUE:
                state = BeliefState(state.w_tr, state.w_c, state.week, True)
            else:
                state = w[t + 1]
        yield seq, traj


class TestUtility:
    def test_stop_at_week_one(self, ctx):
        u = trajectory_utility([(BeliefState(0, 0, 1), Action.STOP_NO_LAUNCH)], TrueEffect(1.0, 0.0), ctx)
        assert u == (0, 0, 0, 0)

    def test_null_effect_run_to_horizon(self, ctx):
        traj = [(BeliefState(0, 0, t), Action.CONTINUE) for t in (1, 2, 3)] + [(BeliefState(0, 0, 4), Action.STOP_NO_LAUNCH)]
        u = trajectory_utility(traj, TrueEffect(0.2, 0.2), ctx)
        assert u == (-3 * ctx.weekly_cost, 0, 0, -3 * ctx.weekly_cost)

    def test_enumerated_trees_match_summed_rewards(self, ctx):
        truth = TrueEffect(0.37, -0.11)
        n = 0
        for seq, traj in enumerate_trajectories(ctx, stream(0, "enum")):
            total = 0.0
            for s, a in traj:
                total += true_reward(s, a, ctx, truth)
            assert trajectory_utility(traj, truth, ctx).total == total
            n += 1
        assert n == 3 ** 3 * 2

    def test_malformed(self, ctx):
        with pytest.raises(ContractError):
            trajectory_utility([(BeliefState(0, 0, 1), Action.CONTINUE)], TrueEffect(0, 0), ctx)
        with pytest.raises(ContractError):
            trajectory_utility([(BeliefState(0, 0, 2), Action.STOP_LAUNCH)], TrueEffect(0, 0), ctx)

    def test_posterior_substitution_in_expectation(self):
        ctx = ctx_with(weekly_cost=20.0)
        n = 40_000
        rng = stream(9, "subst")
        post, true = np.empty(n), np.empty(n)
        for i in range(n):
            mu_tr = ctx.mu0_tr + ctx.sigma0_tr * rng.standard_normal()
            mu_c = ctx.mu0_c + ctx.sigma0_c * rng.standard_normal()
            truth = TrueEffect(mu_tr, mu_c)
            # week 1 from the truth, then posterior-predictive steps are not used: data come from the truth
            state = BeliefState(mu_tr + ctx.sigma_tr / np.sqrt(ctx.n_tr[0]) * rng.standard_normal(),
                                mu_c + ctx.sigma_c / np.sqrt(ctx.n_c[0]) * rng.standard_normal(), 1)
            r_post = r_true = 0.0
            while True:
                a = Action.CONTINUE if state.week < 3 else (
                    Action.STOP_LAUNCH if state_delta_posterior(state, ctx).mean > 0 else Action.STOP_NO_LAUNCH)
                r_post += reward(state, a, ctx)
                r_true += true_reward(state, a, ctx, truth)
                if a is not Action.CONTINUE:
                    break
                l = state.week
                nt, nc = ctx.schedule.cumulative(Group.TREATMENT, l), ctx.schedule.cumulative(Group.CONTROL, l)
                nt1, nc1 = ctx.schedule.cumulative(Group.TREATMENT, l + 1), ctx.schedule.cumulative(Group.CONTROL, l + 1)
                state = BeliefState(
                    (state.w_tr * nt + mu_tr * nt1) / nt1 + ctx.sigma_tr / np.sqrt(nt1) * rng.standard_normal(),
                    (state.w_c * nc + mu_c * nc1) / nc1 + ctx.sigma_c / np.sqrt(nc1) * rng.standard_normal(), l + 1)
            post[i], true[i] = r_post, r_true
        diff = post - true
        assert abs(diff.mean()) < 4 * diff.std(ddof=1) / np.sqrt(n)


class TestContextSerialization:
    def test_round_trip(self, ctx):
        text = ctx.to_json()
        assert set(json.loads(text)) == {"mu0_tr", "sigma0_tr", "mu0_c", "sigma0_c", "sigma_tr", "sigma_c", "n_tr",
                                         "n_c", "weekly_cost", "hurdle_cost", "horizon_t", "post_horizon_h"}
        assert ExperimentContext.from_json(text) == ctx

    def test_missing_and_unknown(self, ctx):
        d = ctx.to_dict()
        del d["sigma_c"]
        with pytest.raises(ValueError, match="sigma_c"):
            ExperimentContext.from_dict(d)
        with pytest.raises(ValueError, match="bogus"):
            ExperimentContext.from_dict({**ctx.to_dict(), "bogus": 1})

    @pytest.mark.parametrize("change", [dict(horizon_t=1, n_tr=(5,), n_c=(5,)), dict(n_tr=(5, 5)),
                                        dict(weekly_cost=-1.0), dict(post_horizon_h=0), dict(sigma_c=0.0)])
    def test_validation(self, change):
        with pytest.raises(ValueError):
            small_context(**change)
