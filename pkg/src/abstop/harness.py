"""Simulation study: cohort generation, method evaluation and metrics.

Evaluation mirrors a meta-analysis over past experiments: each experiment
gets a true effect drawn from the prior, data are simulated from that truth,
and every decision procedure is replayed on the same simulated paths (common
random numbers), so method differences are paired.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import betaln
from scipy.stats import spearmanr

from abstop import baselines as bl
from abstop.conjugate import Group, coeff_table, posterior_params, state_delta_posterior
from abstop.dqn import Policy, act, context_vector, greedy_actions
from abstop.env import Action, BeliefState, ExperimentContext, TrueEffect, initial_state, step
from abstop.rng import stream

CONTINUE, LAUNCH, NO_LAUNCH = 0, 1, 2


# cohort generation


@dataclass(frozen=True)
class DGPConfig:
    n_experiments: int = 3000
    customers_per_experiment: int = 10000
    horizon_t: int = 4
    post_horizon_h: int = 52
    alpha_range: tuple[float, float] = (0.1, 1.0)
    beta_range: tuple[float, float] = (4.0, 60.0)
    mu0_tr: float = 0.1
    sigma0_tr: float = 2.83
    mu0_c: float = 0.1
    sigma0_c: float = 2.0
    sigma_tr: float = 100.0
    sigma_c: float = 100.0
    total_weekly_cost: float = 1.5e8
    hurdle_cost: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alpha_range", tuple(float(v) for v in self.alpha_range))
        object.__setattr__(self, "beta_range", tuple(float(v) for v in self.beta_range))
        if self.n_experiments < 1:
            raise ValueError("n_experiments must be >= 1")
        if self.customers_per_experiment < 1:
            raise ValueError("customers_per_experiment must be >= 1")
        if self.horizon_t < 2:
            raise ValueError("horizon_t must be >= 2")
        if self.post_horizon_h < 1:
            raise ValueError("post_horizon_h must be >= 1")
        for name in ("alpha_range", "beta_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high")
        for name in ("sigma0_tr", "sigma0_c", "sigma_tr", "sigma_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.total_weekly_cost < 0 or self.hurdle_cost < 0:
            raise ValueError("costs must be >= 0")


def beta_geometric_sizes(alpha: float, beta: float, M: int, T: int) -> tuple[int, ...]:
    """Expected weekly first-trigger counts among ``M`` customers.

    A customer's weekly trigger probability is ``p ~ Beta(alpha, beta)``;
    the chance that the first trigger falls in week ``k`` is
    ``B(alpha + 1, beta + k - 1) / B(alpha, beta)``.
    """
    if not (alpha > 0 and beta > 0):
        raise ValueError("alpha and beta must be positive")
    k = np.arange(1, T + 1)
    m = np.exp(betaln(alpha + 1, beta + k - 1) - betaln(alpha, beta))
    counts = [int(round(M * p)) for p in m]
    counts[0] = max(counts[0], 1)
    return tuple(counts)


@dataclass(frozen=True)
class CohortExperiment:
    ctx: ExperimentContext
    truth: TrueEffect

    @property
    def ground_truth_label(self) -> str:
        d = self.truth.delta
        return "positive" if d > 0 else "negative" if d < 0 else "null"

    def to_dict(self) -> dict:
        return {"context": self.ctx.to_dict(), "truth": {"mu_tr": self.truth.mu_tr, "mu_c": self.truth.mu_c}}

    @classmethod
    def from_dict(cls, d: dict) -> CohortExperiment:
        return cls(ExperimentContext.from_dict(d["context"]), TrueEffect(float(d["truth"]["mu_tr"]), float(d["truth"]["mu_c"])))


def split_schedule(counts: Sequence[int]) -> tuple[int, ...]:
    """Per-group half of a weekly count schedule (at least one first-week customer)."""
    half = [int(round(n / 2)) for n in counts]
    half[0] = max(half[0], 1)
    return tuple(half)


def generate_cohort(cfg: DGPConfig, rng: np.random.Generator | None = None) -> list[CohortExperiment]:
    rng = rng if rng is not None else stream(cfg.seed, "cohort")
    draws = []
    for _ in range(cfg.n_experiments):
        a = rng.uniform(*cfg.alpha_range)
        b = rng.uniform(*cfg.beta_range)
        sched = split_schedule(beta_geometric_sizes(a, b, cfg.customers_per_experiment, cfg.horizon_t))
        mu_tr = cfg.mu0_tr + cfg.sigma0_tr * rng.standard_normal()
        mu_c = cfg.mu0_c + cfg.sigma0_c * rng.standard_normal()
        draws.append((sched, float(mu_tr), float(mu_c)))
    totals = np.array([2 * sum(s) for s, _, _ in draws], dtype=float)
    costs = cfg.total_weekly_cost * totals / totals.sum()
    cohort = []
    for (sched, mu_tr, mu_c), cost in zip(draws, costs):
        ctx = ExperimentContext(
            mu0_tr=cfg.mu0_tr, sigma0_tr=cfg.sigma0_tr, mu0_c=cfg.mu0_c, sigma0_c=cfg.sigma0_c,
            sigma_tr=cfg.sigma_tr, sigma_c=cfg.sigma_c, n_tr=sched, n_c=sched,
            weekly_cost=float(cost), hurdle_cost=cfg.hurdle_cost,
            horizon_t=cfg.horizon_t, post_horizon_h=cfg.post_horizon_h,
        )
        cohort.append(CohortExperiment(ctx, TrueEffect(mu_tr, mu_c)))
    return cohort


# methods


@dataclass(frozen=True)
class MethodSpec:
    """A decision procedure and its tuning parameters.

    ``id`` is one of the baseline rule ids or ``"rl"``.  Recognised params:
    ``alpha`` (ffht, alpha_spending, avp), ``threshold`` (bfht, bf, pos),
    ``tau`` (avp; defaults to the prior sd of the effect).
    """

    id: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.id not in METHOD_IDS:
            raise ValueError(f"unknown method id {self.id!r}; valid: {', '.join(METHOD_IDS)}")

    @property
    def label(self) -> str:
        if self.id in ("bf", "pos"):
            return f"{self.id}{_fmt_param(self.params.get('threshold', 3))}"
        return self.id


def _fmt_param(v) -> str:
    return str(int(v)) if float(v).is_integer() else str(v)


METHOD_IDS = bl.RULE_IDS + ("rl",)


@dataclass
class _Batch:
    """Per-trajectory gathered context arrays."""

    exp: np.ndarray
    T: int
    a_tr: np.ndarray
    b_tr: np.ndarray
    cum_tr: np.ndarray
    a_c: np.ndarray
    b_c: np.ndarray
    cum_c: np.ndarray
    mu0_tr: np.ndarray
    sigma0_tr: np.ndarray
    mu0_c: np.ndarray
    sigma0_c: np.ndarray
    sigma_tr: np.ndarray
    sigma_c: np.ndarray
    weekly_cost: np.ndarray
    hurdle_cost: np.ndarray
    post_horizon_h: np.ndarray
    n_total: np.ndarray
    delta: np.ndarray

    @classmethod
    def build(cls, cohort: Sequence[CohortExperiment], exp: np.ndarray) -> _Batch:
        ctxs = [e.ctx for e in cohort]
        T = ctxs[0].horizon_t
        if any(c.horizon_t != T for c in ctxs):
            raise ValueError("all experiments must share the horizon")
        a_tr, b_tr, _, cum_tr = coeff_table(np.array([c.n_tr for c in ctxs]))
        a_c, b_c, _, cum_c = coeff_table(np.array([c.n_c for c in ctxs]))

        def col(name):
            return np.array([getattr(c, name) for c in ctxs], dtype=float)[exp]

        return cls(
            exp=exp, T=T,
            a_tr=a_tr[exp], b_tr=b_tr[exp], cum_tr=cum_tr[exp],
            a_c=a_c[exp], b_c=b_c[exp], cum_c=cum_c[exp],
            mu0_tr=col("mu0_tr"), sigma0_tr=col("sigma0_tr"), mu0_c=col("mu0_c"), sigma0_c=col("sigma0_c"),
            sigma_tr=col("sigma_tr"), sigma_c=col("sigma_c"),
            weekly_cost=col("weekly_cost"), hurdle_cost=col("hurdle_cost"), post_horizon_h=col("post_horizon_h"),
            n_total=np.array([c.n_total for c in ctxs], dtype=float)[exp],
            delta=np.array([e.truth.delta for e in cohort])[exp],
        )

    def posterior(self, w_tr, w_c, week):
        k = week - 1
        m_tr, v_tr = posterior_params(self.mu0_tr, self.sigma0_tr, self.sigma_tr, self.a_tr[:, k], self.b_tr[:, k], w_tr)
        m_c, v_c = posterior_params(self.mu0_c, self.sigma0_c, self.sigma_c, self.a_c[:, k], self.b_c[:, k], w_c)
        return m_tr - m_c, v_tr + v_c

    def seq_stats(self, w_tr, w_c, week) -> bl.SeqStats:
        k = week - 1
        var_tr = self.sigma_tr[:, None] ** 2 * self.b_tr
        var_c = self.sigma_c[:, None] ** 2 * self.b_c
        raw = var_tr / self.a_tr**2 + var_c / self.a_c**2
        return bl.SeqStats(
            week=week, w_tr=w_tr, w_c=w_c, a_tr=self.a_tr[:, k], a_c=self.a_c[:, k],
            var_scale_tr=var_tr[:, k], var_scale_c=var_c[:, k], n_tr=self.cum_tr[:, k], n_c=self.cum_c[:, k],
            info_fraction=raw[:, -1] / raw[:, k],
        )


@dataclass(frozen=True)
class _Post:
    mean: np.ndarray
    variance: np.ndarray


class _Rule:
    def __init__(self, spec: MethodSpec, cohort: Sequence[CohortExperiment], policy: Policy | None):
        self.spec = spec
        self.p = spec.params
        self.policy = policy
        if spec.id == "rl" and policy is None:
            raise ValueError("method 'rl' needs a trained policy")
        if spec.id == "alpha_spending":
            alpha = self.p.get("alpha", 0.05)
            n_grid = self.p.get("n_grid", 401)
            cache: dict[tuple, np.ndarray] = {}
            rows = []
            for e in cohort:
                key = tuple(bl.info_fractions(e.ctx))
                if key not in cache:
                    cache[key] = bl.obf_boundaries(key, alpha, n_grid=n_grid)
                rows.append(cache[key])
            self.bounds = np.array(rows)
        if spec.id == "rl":
            self.ctx_feats = np.array([context_vector(e.ctx) for e in cohort])

    def start(self, batch: _Batch) -> None:
        self.log_lam = []

    def decide(self, batch: _Batch, w_tr, w_c, week: int) -> np.ndarray:
        T, sid, p = batch.T, self.spec.id, self.p
        stats = batch.seq_stats(w_tr, w_c, week)
        if sid == "ffht":
            return bl.ffht_decide(stats, T, p.get("alpha", 0.05)).action
        if sid == "alpha_spending":
            return bl.alpha_spending_decide(stats, self.bounds[batch.exp], week, T).action
        dmean, dvar = batch.posterior(w_tr, w_c, week)
        if sid == "bfht":
            return bl.bfht_decide(_Post(dmean, dvar), week, T, p.get("threshold", 0.66)).action
        if sid == "bfhod":
            return bl.bfhod_decide(_Post(dmean, dvar), batch, week, T).action
        if sid in ("bf", "pos"):
            m, s = batch.mu0_tr - batch.mu0_c, np.sqrt(batch.sigma0_tr**2 + batch.sigma0_c**2)
            priors = bl.OneSidedPriors(m, s, m, s)
            bf = bl.bayes_factor_one_sided(stats.delta_raw, stats.se, priors)
            K = p.get("threshold", 3)
            if sid == "pos":
                return bl.pos_decide(bf, priors.prior_odds(), K, week, T).action
            return bl.bf_decide(bf, K, week, T).action
        if sid == "avp":
            tau = p.get("tau")
            tau = np.sqrt(batch.sigma0_tr**2 + batch.sigma0_c**2) if tau is None else tau
            log_lam = bl.log_msprt_lambda(1, stats.delta_raw, 0.0, stats.se, tau)
            self.log_lam.append(log_lam)
            with np.errstate(over="ignore"):
                lam = np.exp(np.stack(self.log_lam, axis=-1))
            return bl.avp_decide(lam, p.get("alpha", 0.05), week, T, stats.delta_raw).action
        if sid == "rl":
            pol = self.policy
            n = len(w_tr)
            head = np.stack([w_tr, w_c, np.full(n, week / T), np.zeros(n)], axis=1)
            X = pol.feature_norm.apply(np.concatenate([head, self.ctx_feats[batch.exp]], axis=1))
            return greedy_actions(pol, X, week, T)
        raise AssertionError(sid)


# evaluation


@dataclass
class Outcomes:
    """Per-trajectory results of one method; utility components use the true effect."""

    method: str
    horizon_t: int
    exp_index: np.ndarray
    rep: np.ndarray
    stop_week: np.ndarray
    action: np.ndarray
    opportunity_cost: np.ndarray
    experiment_impact: np.ndarray
    launch_impact: np.ndarray
    total: np.ndarray
    posterior_reward: np.ndarray
    delta: np.ndarray

    def __len__(self) -> int:
        return len(self.total)


def default_reps(n_experiments: int, target: int = 50000) -> int:
    return math.ceil(target / n_experiments)


def simulate_paths(cohort: Sequence[CohortExperiment], n_reps: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative-mean paths ``(n_traj, T, 2)`` drawn from each experiment's true means.

    Trajectory ``(i, r)`` uses its own named stream, so paths do not depend on
    the cohort ordering of other experiments or on evaluation parallelism.
    """
    T = cohort[0].ctx.horizon_t
    n = len(cohort) * n_reps
    exp = np.repeat(np.arange(len(cohort)), n_reps)
    rep = np.tile(np.arange(n_reps), len(cohort))
    paths = np.empty((n, T, 2))
    row = 0
    for i, e in enumerate(cohort):
        ctx = e.ctx
        groups = ((e.truth.mu_tr, ctx.sigma_tr, ctx.n_tr), (e.truth.mu_c, ctx.sigma_c, ctx.n_c))
        mus = np.array([g[0] for g in groups])
        cum = np.stack([np.cumsum(g[2], dtype=float) for g in groups], axis=1)
        sd = np.array([g[1] for g in groups]) / np.sqrt(cum)
        keep = np.vstack([np.zeros((1, 2)), cum[:-1] / cum[1:]])
        for r in range(n_reps):
            z = stream(seed, "eval", i, r).standard_normal((T, 2))
            w = np.zeros(2)
            for l in range(T):
                w = w * keep[l] + mus + sd[l] * z[l]
                paths[row, l] = w
            row += 1
    return paths, exp, rep


@dataclass(frozen=True)
class CustomRule:
    """A user-supplied batch rule: ``decide(week, w_tr, w_c, exp_index) -> action codes``."""

    label: str
    decide_fn: Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]

    def start(self, batch: _Batch) -> None:
        pass

    def decide(self, batch: _Batch, w_tr, w_c, week: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.decide_fn(week, w_tr, w_c, batch.exp)), w_tr.shape)


def run_method(spec: MethodSpec | CustomRule | str, cohort: Sequence[CohortExperiment], n_reps: int | None = None,
               seed: int = 0, policy: Policy | None = None, paths=None) -> Outcomes:
    """Replay one decision procedure over every experiment and replication.

    Week 1 is drawn from each experiment's true means, then the rule and
    the true-mean data process alternate until the rule stops.  Utility
    components use the true effect; ``posterior_reward`` sums the
    posterior-mean rewards the policy itself would see.

    Args:
        paths: precomputed :func:`simulate_paths` output so several methods
            share identical data.

    Raises:
        ValueError: for an unknown method id, an empty cohort or ``rl``
            without a policy.
    """
    spec = MethodSpec(spec) if isinstance(spec, str) else spec
    if not cohort:
        raise ValueError("cohort is empty")
    if n_reps is None:
        n_reps = default_reps(len(cohort))
    if paths is None:
        paths = simulate_paths(cohort, n_reps, seed)
    w, exp, rep = paths
    batch = _Batch.build(cohort, exp)
    rule = spec if isinstance(spec, CustomRule) else _Rule(spec, cohort, policy)
    rule.start(batch)
    T = batch.T
    n = len(exp)
    active = np.ones(n, dtype=bool)
    stop_week = np.full(n, T)
    action = np.full(n, NO_LAUNCH)
    opp = np.zeros(n)
    exp_imp = np.zeros(n)
    launch = np.zeros(n)
    post_r = np.zeros(n)
    dtrue = batch.delta
    for week in range(1, T + 1):
        w_tr, w_c = w[:, week - 1, 0], w[:, week - 1, 1]
        codes = np.asarray(rule.decide(batch, w_tr, w_c, week))
        if week == T and np.any(active & (codes == CONTINUE)):
            raise ValueError(f"{spec.label} returned Continue at the horizon")
        dhat, _ = batch.posterior(w_tr, w_c, week)
        cont = active & (codes == CONTINUE)
        stop = active & (codes != CONTINUE)
        if week < T:
            n_next = batch.cum_tr[:, week]
            opp[cont] -= batch.weekly_cost[cont]
            exp_imp[cont] += dtrue[cont] * n_next[cont]
            post_r[cont] += -batch.weekly_cost[cont] + dhat[cont] * n_next[cont]
        lm = stop & (codes == LAUNCH)
        mult = batch.n_total * (batch.post_horizon_h + T - week)
        launch[lm] += dtrue[lm] * mult[lm] - batch.hurdle_cost[lm]
        post_r[lm] += dhat[lm] * mult[lm] - batch.hurdle_cost[lm]
        stop_week[stop] = week
        action[stop] = codes[stop]
        active &= ~stop
    return Outcomes(spec.label, T, exp, rep, stop_week, action, opp, exp_imp, launch,
                    opp + exp_imp + launch, post_r, dtrue)


# metrics and reporting


REPORT_COLUMNS = ("method", "pct_early", "type_i", "power", "fdr", "avg_weeks", "avg_opp_cost",
                  "avg_launch_impact", "avg_exp_impact", "avg_reward", "reward_stderr")


@dataclass(frozen=True)
class MetricsRow:
    method: str
    pct_early_terminated: float
    type_i: float
    power: float | None
    fdr: float
    avg_weeks: float
    avg_opportunity_cost: float
    avg_launch_impact: float
    avg_experiment_impact: float
    avg_cumulative_reward: float
    reward_stderr: float

    def values(self) -> tuple:
        return tuple(getattr(self, f) for f in self.__dataclass_fields__)


def compute_metrics(out: Outcomes, null_threshold: float = 0.0) -> MetricsRow:
    """Decision-accuracy and utility summary of one method.

    A trajectory counts as a true effect when ``delta > null_threshold``;
    launching anything else is a false positive.  ``power`` is the share of
    true-effect trajectories that launched (``None`` without any).
    Opportunity cost is reported as a positive magnitude.
    """
    n = len(out)
    if n == 0:
        raise ValueError("no outcomes")
    launched = out.action == LAUNCH
    positive = out.delta > null_threshold
    tp = int(np.sum(launched & positive))
    fp = int(np.sum(launched & ~positive))
    n_null = int(np.sum(~positive))
    n_pos = int(np.sum(positive))
    return MetricsRow(
        method=out.method,
        pct_early_terminated=float(np.mean(out.stop_week < out.horizon_t)),
        type_i=fp / n_null if n_null else 0.0,
        power=tp / n_pos if n_pos else None,
        fdr=fp / (fp + tp) if fp + tp else 0.0,
        avg_weeks=float(np.mean(out.stop_week)),
        avg_opportunity_cost=float(0.0 - np.mean(out.opportunity_cost)),
        avg_launch_impact=float(np.mean(out.launch_impact)),
        avg_experiment_impact=float(np.mean(out.experiment_impact)),
        avg_cumulative_reward=float(np.mean(out.total)),
        reward_stderr=float(np.std(out.total, ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
    )


def _fmt_num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


def report(rows: Sequence[MetricsRow], path) -> tuple[str, str]:
    """Write ``path`` (CSV) and a sibling ``.txt`` aligned table; returns both paths."""
    path = str(path)
    txt_path = (path[:-4] if path.endswith(".csv") else path) + ".txt"
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in rows:
                w.writerow([_fmt_num(v) for v in r.values()])
        with open(txt_path, "w", encoding="utf-8") as fh:
            fh.write(format_table(rows))
    except OSError as exc:
        raise OSError(f"cannot write report to {exc.filename or path}: {exc.strerror}") from exc
    return path, txt_path


def format_table(rows: Sequence[MetricsRow]) -> str:
    def cell(name, v):
        if v is None:
            return "-"
        if name == "method":
            return v
        if name in ("pct_early", "type_i", "fdr"):
            return f"{100 * v:.2f}%"
        if name in ("power", "avg_weeks"):
            return f"{v:.3f}"
        return f"{v:.6g}"

    table = [list(REPORT_COLUMNS)] + [[cell(n, v) for n, v in zip(REPORT_COLUMNS, r.values())] for r in rows]
    widths = [max(len(row[j]) for row in table) for j in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(c.rjust(wd) if j else c.ljust(wd) for j, (c, wd) in enumerate(zip(row, widths))) for row in table]
    return "\n".join(lines) + "\n"


def read_report(path) -> list[MetricsRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != REPORT_COLUMNS:
            raise ValueError(f"unexpected report header in {path}")
        rows = []
        for rec in rd:
            vals = [rec[0]] + [None if s == "" else float(s) for s in rec[1:]]
            rows.append(MetricsRow(*vals))
    return rows


# direct policy evaluation


def evaluate_policy_value(choose, ctx: ExperimentContext, n_episodes: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of the posterior-mean return from a prior draw.

    ``choose(state) -> Action``.  Episode ``k`` uses stream ``("value", k)``.
    """
    totals = np.empty(n_episodes)
    for k in range(n_episodes):
        rng = stream(seed, "value", k)
        s = initial_state(ctx, rng)
        ret = 0.0
        while not s.terminated:
            out = step(s, choose(s), ctx, rng)
            ret += out.reward
            s = out.next
        totals[k] = ret
    return float(totals.mean()), float(totals.std(ddof=1) / math.sqrt(n_episodes))


# value of information


class Lemma1Result(NamedTuple):
    """Both sides of the wait-one-week identity and the information term.

    ``lhs`` is the simulated reward difference between deciding one week
    later and deciding now; ``rhs`` is the decomposition into information
    value, forgone launch week, in-experiment impact and weekly cost.
    """

    lhs: float
    rhs: float
    stderr: float
    information: float
    information_stderr: float
    state: BeliefState


def _fixed_horizon_value(delta_hat: float, ctx: ExperimentContext, week: int) -> float:
    """Reward of the fixed-horizon Bayes rule deciding at ``week`` (zero hurdle cost)."""
    return max(delta_hat, 0.0) * ctx.n_total * (ctx.post_horizon_h + ctx.horizon_t - week)


def lemma1_gap(ctx: ExperimentContext, t_prime: int, n_mc: int, rng: np.random.Generator,
               state: BeliefState | None = None) -> Lemma1Result:
    """Monte-Carlo check of the value-of-information decomposition.

    Policy one applies the fixed-horizon Bayes rule (launch iff the posterior
    mean effect is positive) at ``t_prime``; policy two continues one more
    week and then applies it.  With ``m`` and ``m'`` the posterior mean
    effects at ``t_prime`` and ``t_prime + 1``, ``L = N_{1:T}`` and
    ``h = H + T - t_prime``, the expected reward difference equals::

        {E[m' 1(m'>0)] - m 1(m>0)} L h - E[m' 1(m'>0)] L + m N_{1:t'+1,Tr} - c

    The left side is estimated by stepping the environment; the right side
    by sampling ``m'`` from its preposterior normal on a separate stream, so
    the two estimates are independent.  The hurdle cost is taken as zero.

    Args:
        state: history at ``t_prime``; drawn from the prior predictive if omitted.

    Raises:
        ValueError: if ``t_prime`` is not in ``1..T-1`` or ``n_mc < 2``.
    """
    T = ctx.horizon_t
    if not 1 <= t_prime < T:
        raise ValueError(f"t_prime must be in 1..{T - 1}, got {t_prime}")
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")
    ctx = ctx.replace(hurdle_cost=0.0)
    rng_a, rng_b = rng.spawn(2)
    if state is None:
        state = initial_state(ctx, rng)
        while state.week < t_prime:
            state = step(state, Action.CONTINUE, ctx, rng).next
    elif state.week != t_prime or state.terminated:
        raise ValueError("state must be a live state at week t_prime")

    post = state_delta_posterior(state, ctx)
    m = post.mean
    v1 = _fixed_horizon_value(m, ctx, t_prime)

    # left side: simulate the one-week continuation
    diffs = np.empty(n_mc)
    for k in range(n_mc):
        out = step(state, Action.CONTINUE, ctx, rng_a)
        m_next = state_delta_posterior(out.next, ctx).mean
        diffs[k] = out.reward + _fixed_horizon_value(m_next, ctx, t_prime + 1) - v1
    lhs, se_a = float(diffs.mean()), float(diffs.std(ddof=1) / math.sqrt(n_mc))

    # right side: preposterior draw of next week's posterior mean
    nxt_var = _delta_variance(ctx, t_prime + 1)
    spread = math.sqrt(max(post.variance - nxt_var, 0.0))
    m_next = m + spread * rng_b.standard_normal(n_mc)
    gain = m_next * (m_next > 0)
    L = ctx.n_total
    h = ctx.post_horizon_h + T - t_prime
    now = m * (m > 0)
    info_terms = gain - now
    terms = info_terms * L * h - gain * L + m * ctx.schedule.cumulative(Group.TREATMENT, t_prime + 1) - ctx.weekly_cost
    rhs, se_b = float(terms.mean()), float(terms.std(ddof=1) / math.sqrt(n_mc))
    info = float(info_terms.mean())
    info_se = float(info_terms.std(ddof=1) / math.sqrt(n_mc))
    return Lemma1Result(lhs, rhs, math.sqrt(se_a**2 + se_b**2), info, info_se, state)


def _delta_variance(ctx: ExperimentContext, week: int) -> float:
    """Posterior variance of the effect at ``week``; it does not depend on the data."""
    return state_delta_posterior(BeliefState(0.0, 0.0, week), ctx).variance


# policy behavior slices


SLICE_STATE_FIELDS = ("w_bar_tr", "w_bar_c", "delta_mean")
SLICE_CONTEXT_FIELDS = ("mu0_tr", "sigma0_tr", "mu0_c", "sigma0_c", "sigma_tr", "sigma_c",
                        "weekly_cost", "hurdle_cost", "post_horizon_h")
SLICE_FIELDS = SLICE_CONTEXT_FIELDS + SLICE_STATE_FIELDS


@dataclass(frozen=True)
class SliceGrid:
    """Recommended actions over a two-axis grid; ``actions[i, j]`` pairs ``values1[i]`` with ``values2[j]``."""

    field1: str
    values1: tuple[float, ...]
    field2: str
    values2: tuple[float, ...]
    actions: np.ndarray

    def to_csv(self) -> str:
        lines = [",".join([f"{self.field1}\\{self.field2}"] + [_fmt_num(v) for v in self.values2])]
        for v, row in zip(self.values1, self.actions):
            lines.append(",".join([_fmt_num(v)] + [Action(int(a)).name for a in row]))
        return "\n".join(lines) + "\n"

    def values_of(self, field_name: str) -> tuple[int, np.ndarray]:
        """Axis index (0 rows, 1 columns) and values of ``field_name``."""
        if field_name == self.field1:
            return 0, np.asarray(self.values1)
        if field_name == self.field2:
            return 1, np.asarray(self.values2)
        raise ValueError(f"{field_name!r} is not an axis of this grid")


def _check_slice_field(name: str) -> None:
    if name not in SLICE_FIELDS:
        raise ValueError(f"unknown slice field {name!r}; valid fields: {', '.join(SLICE_FIELDS)}")


def w_tr_for_delta_mean(delta_mean: float, w_c: float, ctx: ExperimentContext, week: int) -> float:
    """Treatment cumulative mean that puts the posterior mean effect at ``delta_mean``."""
    # the posterior mean effect is affine in the treatment cumulative mean
    m0 = state_delta_posterior(BeliefState(0.0, w_c, week), ctx).mean
    m1 = state_delta_posterior(BeliefState(1.0, w_c, week), ctx).mean
    return (delta_mean - m0) / (m1 - m0)


def policy_slice(policy: Policy, base_ctx: ExperimentContext, base_state: BeliefState,
                 axis1: tuple[str, Sequence[float]], axis2: tuple[str, Sequence[float]]) -> SliceGrid:
    """Greedy actions while two context or state fields vary over a grid.

    Context fields replace values of ``base_ctx``; ``w_bar_tr`` and
    ``w_bar_c`` replace the state's cumulative means; ``delta_mean`` sets the
    treatment cumulative mean so the posterior mean effect hits the value.
    """
    (f1, v1), (f2, v2) = axis1, axis2
    _check_slice_field(f1)
    _check_slice_field(f2)
    if f1 == f2:
        raise ValueError("slice axes must be different fields")
    v1, v2 = tuple(float(x) for x in v1), tuple(float(x) for x in v2)
    out = np.empty((len(v1), len(v2)), dtype=np.int8)
    for i, x in enumerate(v1):
        for j, y in enumerate(v2):
            setting = {f1: x, f2: y}
            ctx_changes = {k: v for k, v in setting.items() if k in SLICE_CONTEXT_FIELDS}
            if "post_horizon_h" in ctx_changes:
                ctx_changes["post_horizon_h"] = int(round(ctx_changes["post_horizon_h"]))
            ctx = base_ctx.replace(**ctx_changes) if ctx_changes else base_ctx
            w_tr = setting.get("w_bar_tr", base_state.w_tr)
            w_c = setting.get("w_bar_c", base_state.w_c)
            if "delta_mean" in setting:
                w_tr = w_tr_for_delta_mean(setting["delta_mean"], w_c, ctx, base_state.week)
            s = BeliefState(w_tr, w_c, base_state.week, base_state.terminated)
            out[i, j] = int(act(policy, s, ctx))
    return SliceGrid(f1, v1, f2, v2, out)


def stop_trend(grid: SliceGrid, field_name: str = "delta_mean") -> np.ndarray:
    """Spearman correlation of ``|field|`` with stopping, one per line across the other axis.

    A line whose actions are all the same has no defined correlation and is
    reported as NaN (it does not contradict the trend).
    """
    axis, vals = grid.values_of(field_name)
    acts = grid.actions if axis == 0 else grid.actions.T
    stops = (acts != CONTINUE).astype(float)
    out = np.full(stops.shape[1], np.nan)
    for j in range(stops.shape[1]):
        col = stops[:, j]
        if np.ptp(col) > 0 and np.ptp(np.abs(vals)) > 0:
            out[j] = spearmanr(np.abs(vals), col).statistic
    return out


def stop_trend_ok(grid: SliceGrid, field_name: str = "delta_mean") -> bool:
    r = stop_trend(grid, field_name)
    return bool(np.all(np.isnan(r) | (r >= 0)))


def continue_fraction_by(grid: SliceGrid, field_name: str = "weekly_cost") -> tuple[np.ndarray, np.ndarray]:
    """Values of ``field_name`` in increasing order with the share of Continue cells at each."""
    axis, vals = grid.values_of(field_name)
    acts = grid.actions if axis == 0 else grid.actions.T
    frac = np.mean(acts == CONTINUE, axis=1)
    order = np.argsort(vals, kind="stable")
    return vals[order], frac[order]


def continue_trend_ok(grid: SliceGrid, field_name: str = "weekly_cost") -> bool:
    """True when lowering ``field_name`` never lowers the share of Continue cells."""
    _, frac = continue_fraction_by(grid, field_name)
    return bool(np.all(np.diff(frac) <= 0))
