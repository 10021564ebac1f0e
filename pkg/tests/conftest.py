import numpy as np
import pytest
from hypothesis import settings

from abstop.env import ExperimentContext

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_context(**changes) -> ExperimentContext:
    base = dict(
        mu0_tr=0.1, sigma0_tr=0.5, mu0_c=0.0, sigma0_c=0.4, sigma_tr=5.0, sigma_c=4.0,
        n_tr=(100, 80, 60, 40), n_c=(90, 70, 50, 30), weekly_cost=50.0, hurdle_cost=10.0,
        horizon_t=4, post_horizon_h=52,
    )
    base.update(changes)
    return ExperimentContext(**base)


@pytest.fixture
def ctx():
    return small_context()


def grid_bayes(mu0, sigma0, sigma, a, b, w_bar, n=400001):
    """Posterior mean and variance of mu by brute-force quadrature of prior x likelihood.

    The likelihood of the cumulative mean is N(a mu, sigma^2 b).  A coarse pass
    locates the posterior, a fine grid of +-14 sd around it integrates it.
    """
    from scipy.integrate import simpson

    def moments(grid):
        logp = -0.5 * ((grid - mu0) / sigma0) ** 2 - 0.5 * (w_bar - a * grid) ** 2 / (sigma**2 * b)
        p = np.exp(logp - logp.max())
        z = simpson(p, x=grid)
        m = simpson(grid * p, x=grid) / z
        v = simpson((grid - m) ** 2 * p, x=grid) / z
        return m, v

    data_sd = sigma * np.sqrt(b) / a
    centre = w_bar / a if data_sd < sigma0 else mu0
    width = 40 * min(sigma0, data_sd) + abs(w_bar / a - mu0)
    m, v = moments(np.linspace(centre - width, centre + width, n))
    sd = np.sqrt(v)
    return moments(np.linspace(m - 14 * sd, m + 14 * sd, n))
