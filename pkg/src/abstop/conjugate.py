"""Normal-Normal model with staggered customer entry.

Customers enter at different weeks, so the cumulative group mean after
week ``l`` is ``W_bar ~ N(mu * a(l), sigma^2 * b(l))`` with

    c(l) = sum_{t<=l} N_t * (l - t + 1),   a = c / N_{1:l},   b = c / N_{1:l}^2.

``W_bar * N_{1:l}`` is the sum of every observed customer-week outcome, so it
is sufficient for ``mu``; the posterior given ``W_bar`` alone is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

from abstop.gaussian import norm_cdf

if TYPE_CHECKING:
    from abstop.env import BeliefState, ExperimentContext


class ScheduleError(ValueError):
    """Degenerate or out-of-range sample schedule access."""


class HorizonError(ValueError):
    """Asked to predict past the final week."""


class StateError(RuntimeError):
    """Operation is undefined for a terminated belief state."""


class Group(Enum):
    TREATMENT = "tr"
    CONTROL = "c"


def _check_positive(name: str, value: float) -> None:
    if not (math.isfinite(value) and value > 0):
        raise ValueError(f"{name} must be positive and finite, got {value!r}")


@dataclass(frozen=True)
class GroupPrior:
    mu0: float
    sigma0: float

    def __post_init__(self):
        if not math.isfinite(self.mu0):
            raise ValueError(f"mu0 must be finite, got {self.mu0!r}")
        _check_positive("sigma0", self.sigma0)


@dataclass(frozen=True)
class NoiseModel:
    sigma: float

    def __post_init__(self):
        _check_positive("sigma", self.sigma)


@dataclass(frozen=True)
class GaussianSummary:
    mean: float
    variance: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.variance)) or self.variance < 0:
            raise ValueError(f"invalid Gaussian summary ({self.mean!r}, {self.variance!r})")

    @property
    def sd(self) -> float:
        return math.sqrt(self.variance)


@dataclass(frozen=True)
class WeightCoeffs:
    a: float
    b: float
    c: float


@dataclass(frozen=True)
class SampleSchedule:
    """Weekly trigger counts ``N_{t,g}`` for both groups, ``t = 1..T``."""

    tr: tuple[int, ...]
    c: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tr", tuple(int(n) for n in self.tr))
        object.__setattr__(self, "c", tuple(int(n) for n in self.c))
        if len(self.tr) != len(self.c) or not self.tr:
            raise ScheduleError("both groups need the same nonzero number of weeks")
        for name, counts in (("tr", self.tr), ("c", self.c)):
            if any(n < 0 for n in counts):
                raise ScheduleError(f"negative count in group {name}")
            if counts[0] < 1:
                raise ScheduleError(f"group {name} needs at least one first-week customer")

    @property
    def horizon(self) -> int:
        return len(self.tr)

    def counts(self, g: Group) -> tuple[int, ...]:
        return self.tr if g is Group.TREATMENT else self.c

    def cumulative(self, g: Group, l: int) -> int:
        """``N_{1:l,g}``."""
        if not 1 <= l <= self.horizon:
            raise ScheduleError(f"week {l} outside 1..{self.horizon}")
        return sum(self.counts(g)[:l])

    def total(self) -> int:
        """``N_{1:T}`` summed over both groups."""
        return sum(self.tr) + sum(self.c)


def weight_coeffs(schedule: SampleSchedule, g: Group, l: int) -> WeightCoeffs:
    if not 1 <= l <= schedule.horizon:
        raise ScheduleError(f"week {l} outside 1..{schedule.horizon}")
    counts = schedule.counts(g)
    n = sum(counts[:l])
    if n <= 0:
        raise ScheduleError("zero cumulative count")
    c = float(sum(counts[t - 1] * (l - t + 1) for t in range(1, l + 1)))
    return WeightCoeffs(a=c / n, b=c / (n * n), c=c)


def coeff_table(counts) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ``(a, b, c, N_{1:l})`` for every week of a count array.

    ``counts`` has weeks on the last axis; leading axes broadcast.
    """
    counts = np.asarray(counts, dtype=float)
    cum = np.cumsum(counts, axis=-1)
    c = np.cumsum(cum, axis=-1)  # c(l) = sum_{j<=l} N_{1:j}
    return c / cum, c / (cum * cum), c, cum


def posterior_params(mu0, sigma0, sigma, a, b, w_bar):
    """Array form of :func:`posterior_mean`; returns ``(mean, variance)``."""
    data_prec = a * a / (sigma * sigma * b)
    var = 1.0 / (1.0 / (sigma0 * sigma0) + data_prec)
    mean = var * (mu0 / (sigma0 * sigma0) + a * w_bar / (sigma * sigma * b))
    return mean, var


def posterior_mean(prior: GroupPrior, noise: NoiseModel, w_bar: float, coeffs: WeightCoeffs) -> GaussianSummary:
    """Posterior of the group mean ``mu`` given the cumulative mean ``w_bar``."""
    _check_positive("sigma0", prior.sigma0)
    _check_positive("sigma", noise.sigma)
    mean, var = posterior_params(prior.mu0, prior.sigma0, noise.sigma, coeffs.a, coeffs.b, w_bar)
    return GaussianSummary(float(mean), float(var))


def predictive_next(
    noise: NoiseModel, mu_draw: float, w_bar_l: float, schedule: SampleSchedule, g: Group, l: int
) -> GaussianSummary:
    """Law of ``W_bar_{l+1}`` given ``mu`` and ``W_bar_l``."""
    if l >= schedule.horizon:
        raise HorizonError(f"no week after {l} (horizon {schedule.horizon})")
    n_l = schedule.cumulative(g, l)
    n_next = schedule.cumulative(g, l + 1)
    mean = (w_bar_l * n_l + mu_draw * n_next) / n_next
    return GaussianSummary(mean, noise.sigma**2 / n_next)


def delta_posterior(post_tr: GaussianSummary, post_c: GaussianSummary) -> GaussianSummary:
    return GaussianSummary(post_tr.mean - post_c.mean, post_tr.variance + post_c.variance)


def prob_positive(delta: GaussianSummary) -> float:
    if delta.variance == 0:
        return 1.0 if delta.mean > 0 else 0.0 if delta.mean < 0 else 0.5
    return float(norm_cdf(delta.mean / math.sqrt(delta.variance)))


def group_posterior(ctx: ExperimentContext, g: Group, w_bar: float, week: int) -> GaussianSummary:
    coeffs = weight_coeffs(ctx.schedule, g, week)
    return posterior_mean(ctx.prior(g), ctx.noise(g), w_bar, coeffs)


def state_delta_posterior(state: BeliefState, ctx: ExperimentContext) -> GaussianSummary:
    return delta_posterior(
        group_posterior(ctx, Group.TREATMENT, state.w_tr, state.week),
        group_posterior(ctx, Group.CONTROL, state.w_c, state.week),
    )


def sample_transition(state: BeliefState, ctx: ExperimentContext, rng: np.random.Generator) -> BeliefState:
    """Advance one week: draw ``mu`` from the posterior, then ``W_bar`` from its predictive.

    Groups are drawn independently, treatment first (two normals each).
    """
    from abstop.env import BeliefState

    if state.terminated:
        raise StateError("cannot transition a terminated state")
    if state.week >= ctx.horizon_t:
        raise HorizonError(f"week {state.week} is the horizon")
    nxt = []
    for g, w in ((Group.TREATMENT, state.w_tr), (Group.CONTROL, state.w_c)):
        post = group_posterior(ctx, g, w, state.week)
        mu = post.mean + post.sd * rng.standard_normal()
        pred = predictive_next(ctx.noise(g), mu, w, ctx.schedule, g, state.week)
        nxt.append(pred.mean + pred.sd * rng.standard_normal())
    return BeliefState(w_tr=float(nxt[0]), w_c=float(nxt[1]), week=state.week + 1, terminated=False)
