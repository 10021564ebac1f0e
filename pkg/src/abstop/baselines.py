"""Classical stopping rules used as comparison baselines.

Each rule maps the week-``t`` sufficient statistics to an :class:`Action`.
The rules are written with numpy broadcasting so the evaluation harness can
apply them to whole batches of trajectories; called with scalars they
return scalar results and an :class:`Action`.

Rule identifiers: ``ffht``, ``alpha_spending``, ``bfht``, ``bfhod``, ``bf``,
``pos``, ``avp``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from abstop.conjugate import GaussianSummary, coeff_table
from abstop.env import Action, ExperimentContext
from abstop.gaussian import norm_cdf, norm_logcdf, norm_pdf, norm_ppf

RULE_IDS = ("ffht", "alpha_spending", "bfht", "bfhod", "bf", "pos", "avp")

CONTINUE, LAUNCH, NO_LAUNCH = int(Action.CONTINUE), int(Action.STOP_LAUNCH), int(Action.STOP_NO_LAUNCH)


class BoundaryError(ValueError):
    """Bad information fractions or a bisection that does not bracket."""


def _as_action(codes):
    codes = np.asarray(codes)
    return Action(int(codes)) if codes.ndim == 0 else codes.astype(np.int8)


@dataclass(frozen=True)
class RuleDecision:
    action: Action | np.ndarray
    statistic: float | np.ndarray
    boundary: float | np.ndarray


@dataclass(frozen=True)
class SeqStats:
    """Sufficient statistics at one look.

    ``var_scale_*`` is ``sigma^2 * b(l)``, the variance of the cumulative mean;
    dividing the cumulative mean by ``a(l)`` gives an unbiased estimate of the
    group mean with variance ``var_scale / a^2``.
    """

    week: int
    w_tr: float | np.ndarray
    w_c: float | np.ndarray
    a_tr: float | np.ndarray
    a_c: float | np.ndarray
    var_scale_tr: float | np.ndarray
    var_scale_c: float | np.ndarray
    n_tr: float | np.ndarray
    n_c: float | np.ndarray
    info_fraction: float | np.ndarray

    @property
    def delta_raw(self):
        return self.w_tr / self.a_tr - self.w_c / self.a_c

    @property
    def variance(self):
        return self.var_scale_tr / self.a_tr**2 + self.var_scale_c / self.a_c**2

    @property
    def se(self):
        return np.sqrt(self.variance)

    @property
    def z(self):
        return self.delta_raw / self.se


def raw_variances(ctx: ExperimentContext) -> np.ndarray:
    """Variance of the de-scaled effect estimate at each week 1..T."""
    a_tr, b_tr, _, _ = coeff_table(ctx.n_tr)
    a_c, b_c, _, _ = coeff_table(ctx.n_c)
    return ctx.sigma_tr**2 * b_tr / a_tr**2 + ctx.sigma_c**2 * b_c / a_c**2


def info_fractions(ctx: ExperimentContext) -> np.ndarray:
    v = raw_variances(ctx)
    return v[-1] / v


def seq_stats(w_tr, w_c, ctx: ExperimentContext, week: int) -> SeqStats:
    a_tr, b_tr, _, cum_tr = coeff_table(ctx.n_tr)
    a_c, b_c, _, cum_c = coeff_table(ctx.n_c)
    k = week - 1
    return SeqStats(
        week=week,
        w_tr=w_tr,
        w_c=w_c,
        a_tr=a_tr[k],
        a_c=a_c[k],
        var_scale_tr=ctx.sigma_tr**2 * b_tr[k],
        var_scale_c=ctx.sigma_c**2 * b_c[k],
        n_tr=cum_tr[k],
        n_c=cum_c[k],
        info_fraction=info_fractions(ctx)[k],
    )


def _at_horizon(week, T) -> bool:
    return week >= T


# fixed-horizon rules


def ffht_decide(stats: SeqStats, T: int, alpha: float = 0.05) -> RuleDecision:
    """Two-sided z-test at the horizon; only a positive rejection launches."""
    z = stats.z
    crit = float(norm_ppf(1 - alpha / 2))
    if not _at_horizon(stats.week, T):
        return RuleDecision(_as_action(np.full(np.shape(z), CONTINUE)), z, crit)
    return RuleDecision(_as_action(np.where(z > crit, LAUNCH, NO_LAUNCH)), z, crit)


def bfht_decide(delta_post: GaussianSummary, week: int, T: int, threshold: float = 0.66) -> RuleDecision:
    mean, var = np.asarray(delta_post.mean, dtype=float), np.asarray(delta_post.variance, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(var > 0, norm_cdf(mean / np.sqrt(np.where(var > 0, var, 1.0))), np.sign(mean) * 0.5 + 0.5)
    if not _at_horizon(week, T):
        return RuleDecision(_as_action(np.full(p.shape, CONTINUE)), p, threshold)
    return RuleDecision(_as_action(np.where(p > threshold, LAUNCH, NO_LAUNCH)), p, threshold)


def bfhod_decide(delta_post: GaussianSummary, ctx: ExperimentContext, week: int, T: int) -> RuleDecision:
    """Launch at the horizon iff the posterior-mean annual gain beats the hurdle cost."""
    gain = np.asarray(delta_post.mean, dtype=float) * ctx.post_horizon_h * ctx.n_total
    if not _at_horizon(week, T):
        return RuleDecision(_as_action(np.full(gain.shape, CONTINUE)), gain, ctx.hurdle_cost)
    return RuleDecision(_as_action(np.where(gain > ctx.hurdle_cost, LAUNCH, NO_LAUNCH)), gain, ctx.hurdle_cost)


# alpha spending


def obf_spending(t_star, alpha: float = 0.05):
    """Cumulative type-I error spent by information fraction ``t_star``."""
    t = np.asarray(t_star, dtype=float)
    if np.any(t <= 0) or np.any(t > 1 + 1e-12):
        raise BoundaryError("information fraction must lie in (0, 1]")
    q = norm_ppf(1 - alpha / 4)
    return 4 * norm_cdf(-q / np.sqrt(t))


def _trapezoid_weights(x: np.ndarray) -> np.ndarray:
    w = np.full(x.shape, x[1] - x[0])
    w[0] = w[-1] = 0.5 * (x[1] - x[0])
    return w


def obf_boundaries(info_fractions: Sequence[float], alpha: float = 0.05, n_grid: int = 801, tol: float = 1e-10) -> np.ndarray:
    """Two-sided group-sequential boundaries for the O'Brien-Fleming-type spending function.

    Boundaries are solved look by look: the probability of first crossing at
    look ``k`` must equal the spending increment.  Crossing probabilities use
    the density of the surviving score process, propagated between looks by
    trapezoidal integration on ``n_grid`` points.

    Returns:
        Array of z-scale boundaries, one per look.
    """
    t = np.asarray(info_fractions, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise BoundaryError("need at least one information fraction")
    if np.any(np.diff(t) <= 0):
        raise BoundaryError("information fractions must be strictly increasing")
    if t[0] <= 0 or abs(t[-1] - 1.0) > 1e-9:
        raise BoundaryError("information fractions must lie in (0, 1] and end at 1")
    spent = obf_spending(np.minimum(t, 1.0), alpha)
    increments = np.diff(spent, prepend=0.0)

    bounds = np.empty(t.size)
    bounds[0] = norm_ppf(1 - increments[0] / 2)
    h = bounds[0] * math.sqrt(t[0])
    x = np.linspace(-h, h, n_grid)
    dens = norm_pdf(x / math.sqrt(t[0])) / math.sqrt(t[0])
    for k in range(1, t.size):
        sd = math.sqrt(t[k] - t[k - 1])
        mass = dens * _trapezoid_weights(x)
        root_t = math.sqrt(t[k])

        def exit_prob(b):
            hk = b * root_t
            return float(mass @ (norm_cdf((-hk - x) / sd) + norm_cdf((x - hk) / sd)))

        target = increments[k]
        lo, hi = 0.0, 40.0
        if not exit_prob(lo) >= target >= exit_prob(hi):
            raise BoundaryError(f"bisection does not bracket the spending increment at look {k + 1}")
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if exit_prob(mid) > target:
                lo = mid
            else:
                hi = mid
        bounds[k] = 0.5 * (lo + hi)
        hk = bounds[k] * root_t
        y = np.linspace(-hk, hk, n_grid)
        dens = norm_pdf((y[:, None] - x[None, :]) / sd) @ mass / sd
        x = y
    return bounds


def alpha_spending_decide(stats: SeqStats, boundaries: Sequence[float] | np.ndarray, week: int, T: int) -> RuleDecision:
    """Reject when ``|z|`` reaches the look's boundary; the sign picks the action.

    ``boundaries`` is indexed by look on its last axis, so a batch may carry
    one boundary row per trajectory.
    """
    z = stats.z
    bound = np.asarray(boundaries, dtype=float)[..., week - 1]
    codes = np.where(z >= bound, LAUNCH, np.where(z <= -bound, NO_LAUNCH, CONTINUE))
    if _at_horizon(week, T):
        codes = np.where(codes == CONTINUE, NO_LAUNCH, codes)
    return RuleDecision(_as_action(codes), z, bound)


# Bayes factors and posterior odds


@dataclass(frozen=True)
class OneSidedPriors:
    """Truncated-normal effect priors: H0 on ``mu < 0``, H1 on ``mu > 0``."""

    mu0: float
    sigma0: float
    mu1: float
    sigma1: float

    def __post_init__(self):
        if not (np.all(np.asarray(self.sigma0) > 0) and np.all(np.asarray(self.sigma1) > 0)):
            raise ValueError("prior standard deviations must be positive")

    @classmethod
    def from_effect_prior(cls, mean: float, sd: float) -> OneSidedPriors:
        return cls(mean, sd, mean, sd)

    def prior_odds(self):
        """``P(H1) / P(H0)`` from the untruncated priors' mass on each side of zero."""
        out = np.exp(norm_logcdf(np.divide(self.mu1, self.sigma1)) - norm_logcdf(-np.divide(self.mu0, self.sigma0)))
        return out if np.ndim(out) else float(out)


def log_bayes_factor_one_sided(y_bar, se, priors: OneSidedPriors):
    """Log of the exact one-sided Bayes factor ``BF[H1:H0]`` for ``y_bar ~ N(mu, se^2)``."""
    y = np.asarray(y_bar, dtype=float)
    s2 = np.asarray(se, dtype=float) ** 2
    if np.any(s2 <= 0):
        raise ValueError("standard error must be positive")
    m0, v0, m1, v1 = priors.mu0, priors.sigma0**2, priors.mu1, priors.sigma1**2
    # posterior of mu under each untruncated prior
    post_m0 = (y * v0 + m0 * s2) / (v0 + s2)
    post_s0 = np.sqrt(v0 * s2 / (v0 + s2))
    post_m1 = (y * v1 + m1 * s2) / (v1 + s2)
    post_s1 = np.sqrt(v1 * s2 / (v1 + s2))
    out = (
        norm_logcdf(post_m1 / post_s1)
        - norm_logcdf(m1 / priors.sigma1)
        + norm_logcdf(-m0 / priors.sigma0)
        - norm_logcdf(-post_m0 / post_s0)
        + 0.5 * np.log((v0 + s2) / (v1 + s2))
        - 0.5 * (m1 - y) ** 2 / (s2 + v1)
        + 0.5 * (m0 - y) ** 2 / (s2 + v0)
    )
    return out if np.ndim(out) else float(out)


def bayes_factor_one_sided(y_bar, se, priors: OneSidedPriors):
    with np.errstate(over="ignore"):
        out = np.exp(log_bayes_factor_one_sided(y_bar, se, priors))
    return out if np.ndim(out) else float(out)


def bf_decide(bf, threshold: float, week: int, T: int) -> RuleDecision:
    """Launch on ``bf >= K``, stop for futility on ``bf <= 1/K``; at the horizon launch iff ``bf > 1``."""
    bf = np.asarray(bf, dtype=float)
    if _at_horizon(week, T):
        codes = np.where(bf > 1, LAUNCH, NO_LAUNCH)
    else:
        codes = np.where(bf >= threshold, LAUNCH, np.where(bf <= 1 / threshold, NO_LAUNCH, CONTINUE))
    return RuleDecision(_as_action(codes), bf if bf.ndim else float(bf), threshold)


def posterior_odds(bf, prior_odds: float):
    return prior_odds * bf


def pos_decide(bf, prior_odds: float, threshold: float, week: int, T: int) -> RuleDecision:
    return bf_decide(posterior_odds(bf, prior_odds), threshold, week, T)


# mixture SPRT / always-valid p-values


def log_msprt_lambda(n, y_bar, theta0: float, sigma, tau: float):
    """Log mixture likelihood ratio for a normal mean with ``N(theta0, tau^2)`` mixing."""
    n = np.asarray(n, dtype=float)
    s2 = np.asarray(sigma, dtype=float) ** 2
    if np.any(n < 1) or np.any(s2 <= 0) or np.any(np.asarray(tau) <= 0):
        raise ValueError("need n >= 1, sigma > 0 and tau > 0")
    t2 = np.asarray(tau, dtype=float) ** 2
    denom = s2 + n * t2
    out = 0.5 * np.log(s2 / denom) + n * n * t2 * (np.asarray(y_bar) - theta0) ** 2 / (2 * s2 * denom)
    return out if np.ndim(out) else float(out)


def msprt_lambda(n, y_bar, theta0: float, sigma, tau: float):
    with np.errstate(over="ignore"):
        out = np.exp(log_msprt_lambda(n, y_bar, theta0, sigma, tau))
    return out if np.ndim(out) else float(out)


def always_valid_p(lambda_seq) -> np.ndarray:
    """Running ``p_n = min(p_{n-1}, 1/Lambda_n)`` with ``p_0 = 1``; looks on the last axis."""
    lam = np.asarray(lambda_seq, dtype=float)
    with np.errstate(divide="ignore"):
        inv = np.where(lam > 0, 1.0 / lam, np.inf)
    return np.minimum.accumulate(np.minimum(inv, 1.0), axis=-1)


def avp_decide(lambda_seq, alpha: float, week: int, T: int, delta_raw) -> RuleDecision:
    """Stop once the always-valid p-value reaches ``alpha``; launch only on a positive estimate.

    ``lambda_seq`` holds the mixture likelihood ratios of looks ``1..week``
    on its last axis.
    """
    p = always_valid_p(lambda_seq)[..., week - 1]
    reject = p <= alpha
    codes = np.where(reject, np.where(np.asarray(delta_raw) > 0, LAUNCH, NO_LAUNCH), CONTINUE)
    if _at_horizon(week, T):
        codes = np.where(codes == CONTINUE, NO_LAUNCH, codes)
    return RuleDecision(_as_action(codes), p if np.ndim(p) else float(p), alpha)
