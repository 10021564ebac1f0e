"""Episodic stop/launch decision environment.

Weeks are decision points: at the end of week ``t`` the experimenter may
keep running (0), stop and launch (1) or stop without launching (2).  The
per-week reward uses the posterior mean of the effect; the evaluation-only
:func:`trajectory_utility` uses the true effect instead.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from enum import IntEnum
from typing import NamedTuple, Sequence

import numpy as np

from abstop.conjugate import (
    GaussianSummary,
    Group,
    GroupPrior,
    NoiseModel,
    SampleSchedule,
    ScheduleError,
    sample_transition,
    state_delta_posterior,
)


class ContractError(ValueError):
    """Illegal action for the week, or malformed trajectory."""


class Action(IntEnum):
    CONTINUE = 0
    STOP_LAUNCH = 1
    STOP_NO_LAUNCH = 2


CONTEXT_FIELDS = (
    "mu0_tr",
    "sigma0_tr",
    "mu0_c",
    "sigma0_c",
    "sigma_tr",
    "sigma_c",
    "n_tr",
    "n_c",
    "weekly_cost",
    "hurdle_cost",
    "horizon_t",
    "post_horizon_h",
)


@dataclass(frozen=True)
class ExperimentContext:
    """Everything known about one experiment before it starts."""

    mu0_tr: float
    sigma0_tr: float
    mu0_c: float
    sigma0_c: float
    sigma_tr: float
    sigma_c: float
    n_tr: tuple[int, ...]
    n_c: tuple[int, ...]
    weekly_cost: float
    hurdle_cost: float
    horizon_t: int
    post_horizon_h: int
    schedule: SampleSchedule = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "n_tr", tuple(int(n) for n in self.n_tr))
        object.__setattr__(self, "n_c", tuple(int(n) for n in self.n_c))
        if int(self.horizon_t) != self.horizon_t or self.horizon_t < 2:
            raise ValueError(f"horizon_t must be an integer >= 2, got {self.horizon_t!r}")
        if int(self.post_horizon_h) != self.post_horizon_h or self.post_horizon_h < 1:
            raise ValueError(f"post_horizon_h must be an integer >= 1, got {self.post_horizon_h!r}")
        if len(self.n_tr) != self.horizon_t or len(self.n_c) != self.horizon_t:
            raise ValueError(f"n_tr and n_c must have horizon_t={self.horizon_t} entries")
        for name in ("weekly_cost", "hurdle_cost"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")
        # validates priors and noise
        GroupPrior(self.mu0_tr, self.sigma0_tr)
        GroupPrior(self.mu0_c, self.sigma0_c)
        NoiseModel(self.sigma_tr)
        NoiseModel(self.sigma_c)
        object.__setattr__(self, "schedule", SampleSchedule(self.n_tr, self.n_c))

    def prior(self, g: Group) -> GroupPrior:
        if g is Group.TREATMENT:
            return GroupPrior(self.mu0_tr, self.sigma0_tr)
        return GroupPrior(self.mu0_c, self.sigma0_c)

    def noise(self, g: Group) -> NoiseModel:
        return NoiseModel(self.sigma_tr if g is Group.TREATMENT else self.sigma_c)

    @property
    def n_total(self) -> int:
        return self.schedule.total()

    def to_dict(self) -> dict:
        d = {name: getattr(self, name) for name in CONTEXT_FIELDS}
        d["n_tr"] = list(self.n_tr)
        d["n_c"] = list(self.n_c)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentContext:
        missing = [k for k in CONTEXT_FIELDS if k not in d]
        if missing:
            raise ValueError(f"context is missing field(s): {', '.join(missing)}")
        unknown = sorted(set(d) - set(CONTEXT_FIELDS))
        if unknown:
            raise ValueError(f"context has unknown field(s): {', '.join(unknown)}")
        return cls(**{k: d[k] for k in CONTEXT_FIELDS})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> ExperimentContext:
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> ExperimentContext:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.init}
        d.update(changes)
        return type(self)(**d)


@dataclass(frozen=True)
class BeliefState:
    w_tr: float
    w_c: float
    week: int
    terminated: bool = False


@dataclass(frozen=True)
class TrueEffect:
    mu_tr: float
    mu_c: float

    @property
    def delta(self) -> float:
        return self.mu_tr - self.mu_c


class StepOutcome(NamedTuple):
    next: BeliefState
    reward: float
    info: GaussianSummary


class Utility(NamedTuple):
    opportunity_cost: float
    experiment_impact: float
    launch_impact: float
    total: float


def action_space(week: int, T: int) -> frozenset[Action]:
    if not 1 <= week <= T:
        raise ContractError(f"week {week} outside 1..{T}")
    if week < T:
        return frozenset(Action)
    return frozenset((Action.STOP_LAUNCH, Action.STOP_NO_LAUNCH))


def launch_impact(delta_hat: float, ctx: ExperimentContext, week: int) -> float:
    """Extrapolated impact of launching at the end of ``week``."""
    return delta_hat * (ctx.post_horizon_h + ctx.horizon_t - week) * ctx.n_total


def _reward_for(delta: float, state: BeliefState, action: Action, ctx: ExperimentContext) -> float:
    if state.terminated:
        return 0.0
    if action not in action_space(state.week, ctx.horizon_t):
        raise ContractError(f"action {action!r} illegal at week {state.week}")
    if action is Action.CONTINUE:
        return -ctx.weekly_cost + delta * ctx.schedule.cumulative(Group.TREATMENT, state.week + 1)
    if action is Action.STOP_LAUNCH:
        return launch_impact(delta, ctx, state.week) - ctx.hurdle_cost
    return 0.0


def reward(state: BeliefState, action: Action, ctx: ExperimentContext) -> float:
    if state.terminated:
        return 0.0
    delta_hat = state_delta_posterior(state, ctx).mean
    return _reward_for(delta_hat, state, Action(action), ctx)


def true_reward(state: BeliefState, action: Action, ctx: ExperimentContext, truth: TrueEffect) -> float:
    """Per-week reward with the true effect in place of its posterior mean."""
    return _reward_for(truth.delta, state, Action(action), ctx)


def initial_state(ctx: ExperimentContext, rng: np.random.Generator) -> BeliefState:
    """Week-1 state: one transition from the prior (every experiment runs a week)."""
    wc = []
    for g in (Group.TREATMENT, Group.CONTROL):
        prior, noise = ctx.prior(g), ctx.noise(g)
        mu = prior.mu0 + prior.sigma0 * rng.standard_normal()
        n1 = ctx.schedule.counts(g)[0]
        wc.append(mu + noise.sigma / math.sqrt(n1) * rng.standard_normal())
    return BeliefState(w_tr=float(wc[0]), w_c=float(wc[1]), week=1)


def step(state: BeliefState, action: Action, ctx: ExperimentContext, rng: np.random.Generator) -> StepOutcome:
    action = Action(action)
    if state.week > ctx.horizon_t:
        raise ContractError(f"week {state.week} past horizon {ctx.horizon_t}")
    info = state_delta_posterior(state, ctx)
    if state.terminated:
        return StepOutcome(state, 0.0, info)
    r = _reward_for(info.mean, state, action, ctx)
    if action is Action.CONTINUE:
        nxt = sample_transition(state, ctx, rng)
    else:
        nxt = BeliefState(state.w_tr, state.w_c, state.week, terminated=True)
    return StepOutcome(nxt, r, info)


def trajectory_utility(
    traj: Sequence[tuple[BeliefState, Action]], truth: TrueEffect, ctx: ExperimentContext
) -> Utility:
    """Opportunity cost, in-experiment impact and launch impact, against the truth.

    Week 1 costs nothing here: every experiment runs it regardless of policy.
    Terms accumulate in week order so the total is bit-identical to summing
    :func:`true_reward` along the same trajectory.
    """
    T = ctx.horizon_t
    delta = truth.delta
    opp = exp_impact = launch = total = 0.0
    stopped = False
    expected_week = 1
    for state, action in traj:
        action = Action(action)
        if stopped or state.terminated:
            if not (stopped and state.terminated):
                raise ContractError("terminated flag inconsistent with trajectory")
            continue
        if state.week != expected_week:
            raise ContractError(f"expected week {expected_week}, got {state.week}")
        if action not in action_space(state.week, T):
            raise ContractError(f"action {action!r} illegal at week {state.week}")
        if action is Action.CONTINUE:
            cost = -ctx.weekly_cost
            impact = delta * ctx.schedule.cumulative(Group.TREATMENT, state.week + 1)
            opp += cost
            exp_impact += impact
            total += cost + impact
            expected_week += 1
        else:
            if action is Action.STOP_LAUNCH:
                gain = launch_impact(delta, ctx, state.week) - ctx.hurdle_cost
                launch += gain
                total += gain
            stopped = True
    if not stopped:
        raise ContractError("trajectory never stops")
    return Utility(opp, exp_impact, launch, total)


__all__ = [
    "Action",
    "BeliefState",
    "ContractError",
    "ExperimentContext",
    "ScheduleError",
    "StepOutcome",
    "TrueEffect",
    "Utility",
    "action_space",
    "initial_state",
    "launch_impact",
    "reward",
    "step",
    "trajectory_utility",
    "true_reward",
]
