"""Exact backward induction on a discretized belief grid.

Used as a verification oracle for the learned policy on small instances.
The belief state of each group is its cumulative mean; the two groups are
conditionally independent, so the one-week transition factorizes into a
treatment matrix and a control matrix and the expected next-week value is
``P_tr @ V @ P_c.T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from abstop.conjugate import coeff_table, posterior_params
from abstop.env import Action, BeliefState, ExperimentContext
from abstop.gaussian import norm_cdf


class CoverageError(ValueError):
    """The grid cannot resolve the one-week predictive distribution."""


@dataclass(frozen=True)
class GridSpec:
    n_points: int = 60
    n_sd: float = 6.0
    max_horizon: int = 6
    max_points: int = 200


@dataclass(frozen=True)
class TabularQ:
    """Optimal Q on the grid: ``q[week-1, i_tr, i_c, action]``.

    Continue at the horizon is illegal and stored as NaN.
    """

    grid_tr: np.ndarray
    grid_c: np.ndarray
    q: np.ndarray
    initial_value: float

    def values(self, week: int) -> np.ndarray:
        return np.nanmax(self.q[week - 1], axis=-1)

    def q_at(self, state: BeliefState) -> np.ndarray:
        """Bilinear interpolation of the week's Q-table, clamped at the grid edge."""
        k = state.week - 1
        out = np.empty(3)
        for a in range(3):
            out[a] = _bilinear(self.grid_tr[k], self.grid_c[k], self.q[k, :, :, a], state.w_tr, state.w_c)
        return out

    def action(self, state: BeliefState) -> Action:
        q = self.q_at(state)
        if state.week >= self.q.shape[0]:
            q[0] = -np.inf
        return Action(int(np.argmax(q)))


def _bilinear(gx, gy, table, x, y) -> float:
    def locate(g, v):
        v = min(max(v, g[0]), g[-1])
        i = min(int(np.searchsorted(g, v, side="right")) - 1, len(g) - 2)
        return i, (v - g[i]) / (g[i + 1] - g[i])

    i, fx = locate(gx, x)
    j, fy = locate(gy, y)
    return float(
        (1 - fx) * (1 - fy) * table[i, j] + fx * (1 - fy) * table[i + 1, j]
        + (1 - fx) * fy * table[i, j + 1] + fx * fy * table[i + 1, j + 1]
    )


def _cell_probs(centers: np.ndarray, mean: np.ndarray, sd) -> np.ndarray:
    """Probability mass of ``N(mean_i, sd_i^2)`` on each grid cell; tails go to the end cells."""
    edges = 0.5 * (centers[1:] + centers[:-1])
    cdf = norm_cdf((edges[None, :] - mean[:, None]) / np.reshape(sd, (-1, 1)))
    cdf = np.concatenate([np.zeros((len(mean), 1)), cdf, np.ones((len(mean), 1))], axis=1)
    return np.diff(cdf, axis=1)


def _group_grids(mu0, sigma0, sigma, counts, spec: GridSpec):
    a, b, _, cum = coeff_table(counts)
    centers = mu0 * a
    sds = np.sqrt(sigma0**2 * a**2 + sigma**2 * b)
    grids = np.stack([np.linspace(m - spec.n_sd * s, m + spec.n_sd * s, spec.n_points) for m, s in zip(centers, sds)])
    post_mean, post_var = posterior_params(mu0, sigma0, sigma, a[:, None], b[:, None], grids)
    return grids, post_mean, np.broadcast_to(post_var, grids.shape)[:, 0], cum, sds


def _transition(grids, post_mean, post_var, cum, sigma, l: int) -> np.ndarray:
    """Matrix from week ``l`` grid (1-indexed) to week ``l + 1`` grid."""
    src, dst = grids[l - 1], grids[l]
    pred_mean = src * cum[l - 1] / cum[l] + post_mean[l - 1]
    pred_sd = np.sqrt(post_var[l - 1] + sigma**2 / cum[l])
    width = dst[1] - dst[0]
    if width > 2 * pred_sd:
        raise CoverageError(
            f"week {l + 1} grid spacing {width:.4g} exceeds twice the predictive sd {pred_sd:.4g}; "
            "+-6 predictive sd would span fewer than 6 cells"
        )
    return _cell_probs(dst, pred_mean, pred_sd)


def dp_solve(ctx: ExperimentContext, grid: GridSpec = GridSpec()) -> TabularQ:
    T = ctx.horizon_t
    if T > grid.max_horizon:
        raise ValueError(f"horizon {T} too long for exact DP (max {grid.max_horizon})")
    if not 2 <= grid.n_points <= grid.max_points:
        raise ValueError(f"grid must have 2..{grid.max_points} points per axis")
    if grid.n_sd < 6:
        raise CoverageError("grid must span at least +-6 marginal standard deviations")
    g_tr, m_tr, v_tr, cum_tr, sd_tr = _group_grids(ctx.mu0_tr, ctx.sigma0_tr, ctx.sigma_tr, ctx.n_tr, grid)
    g_c, m_c, v_c, cum_c, sd_c = _group_grids(ctx.mu0_c, ctx.sigma0_c, ctx.sigma_c, ctx.n_c, grid)
    n_total = ctx.n_total
    H = ctx.post_horizon_h

    q = np.full((T, grid.n_points, grid.n_points, 3), np.nan)
    v_next = None
    for l in range(T, 0, -1):
        dhat = m_tr[l - 1][:, None] - m_c[l - 1][None, :]
        q[l - 1, :, :, Action.STOP_LAUNCH] = dhat * (H + T - l) * n_total - ctx.hurdle_cost
        q[l - 1, :, :, Action.STOP_NO_LAUNCH] = 0.0
        if l < T:
            p_tr = _transition(g_tr, m_tr, v_tr, cum_tr, ctx.sigma_tr, l)
            p_c = _transition(g_c, m_c, v_c, cum_c, ctx.sigma_c, l)
            q[l - 1, :, :, Action.CONTINUE] = -ctx.weekly_cost + dhat * cum_tr[l] + p_tr @ v_next @ p_c.T
        v_next = np.nanmax(q[l - 1], axis=-1)

    w_tr = _cell_probs(g_tr[0], np.array([ctx.mu0_tr]), sd_tr[0])[0]
    w_c = _cell_probs(g_c[0], np.array([ctx.mu0_c]), sd_c[0])[0]
    init = float(w_tr @ v_next @ w_c)
    return TabularQ(g_tr, g_c, q, init)
