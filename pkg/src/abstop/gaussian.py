"""Standard-normal CDF, log-CDF, density and quantile.

Every module goes through these helpers so that boundary solving, Bayes
factors and posterior probabilities share one numerical source.
"""

import math

import numpy as np
from scipy import special

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def norm_cdf(x):
    return special.ndtr(x)


def norm_sf(x):
    """Upper tail ``1 - Phi(x)`` without cancellation."""
    return special.ndtr(np.negative(x))


def norm_logcdf(x):
    return special.log_ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x - _LOG_SQRT_2PI)
    return out if out.ndim else float(out)


def norm_ppf(p):
    """Quantile of the standard normal; ``p`` in (0, 1)."""
    return special.ndtri(p)
