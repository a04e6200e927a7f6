"""Scoring rules for point and probabilistic predictions."""

import numpy as np
from scipy import stats

_SQRT_PI = np.sqrt(np.pi)


def rmse(y, yhat):
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def crps_gaussian(y, mu, sigma):
    """Closed-form CRPS of a Gaussian predictive distribution.

    crps = sigma * [ z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi) ],
    z = (y - mu) / sigma.  Vectorized over its arguments.
    """
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    z = (np.asarray(y, dtype=float) - np.asarray(mu, dtype=float)) / sigma
    out = sigma * (z * (2.0 * stats.norm.cdf(z) - 1.0)
                   + 2.0 * stats.norm.pdf(z) - 1.0 / _SQRT_PI)
    return out if out.ndim else float(out)


def quantile_loss(y, yhat, alpha):
    """Pinball loss (y - yhat) (alpha - 1{y <= yhat}); proper for quantiles."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly inside (0, 1)")
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    out = (y - yhat) * (alpha - (y <= yhat))
    return out if out.ndim else float(out)


def paired_t_pvalue(a, b):
    """Two-sided paired t-test p-value for equal means of a and b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two equally sized samples with >= 2 entries")
    d = a - b
    sd = np.std(d, ddof=1)
    if sd == 0.0:
        return 1.0 if np.mean(d) == 0.0 else 0.0
    t = np.mean(d) / (sd / np.sqrt(d.size))
    return float(2.0 * stats.t.sf(abs(t), df=d.size - 1))
