"""Truncated normal distribution: reparameterised sampling and summaries."""

from __future__ import annotations

import numpy as np
from scipy import stats
from scipy.special import erfcx, ndtr, ndtri

from .exceptions import DegenerateTruncationError

MIN_MASS = 1e-12


def _std_bounds(mu, sigma, a, b):
    mu, sigma, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mu, sigma, a, b)))
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    if np.any(~(a < b)):
        raise ValueError("truncation requires a < b")
    return mu, sigma, (a - mu) / sigma, (b - mu) / sigma


def _sample(mu, sigma, a, b, u):
    mu, sigma, a, b, u = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mu, sigma, a, b, u)))
    mu, sigma, alpha, beta = _std_bounds(mu, sigma, a, b)
    if np.any((u < 0) | (u > 1)):
        raise ValueError("u must lie in [0, 1]")
    # work in whichever tail keeps the CDF values small
    flip = alpha > 0
    lo = np.where(flip, -beta, alpha)
    hi = np.where(flip, -alpha, beta)
    uf = np.where(flip, 1.0 - u, u)
    Fa, Fb = ndtr(lo), ndtr(hi)
    mass = Fb - Fa
    if np.any(~(mass >= MIN_MASS)):
        raise DegenerateTruncationError(
            "truncated normal has numerically no mass on [a, b]; widen sigma"
        )
    w = ndtri(Fa + uf * mass)
    xs = np.where(flip, -w, w)
    x = np.clip(mu + sigma * xs, a, b)
    x = np.where(u == 0, a, np.where(u == 1, b, x))
    return x, mu, sigma, alpha, beta, u


def sample_trunc_normal(mu, sigma, a, b, u):
    """Map uniform variates ``u`` to draws from ``TN_[a,b](mu, sigma^2)``.

    ``eps = F(a) + u (F(b) - F(a))`` and ``x = mu + sigma * Phi^-1(eps)``,
    evaluated in the tail where it is numerically stable.
    """
    x = _sample(mu, sigma, a, b, u)[0]
    return x if x.ndim else float(x)


def sample_trunc_normal_grad(mu, sigma, a, b, u):
    """Draws plus pathwise derivatives ``dx/dmu`` and ``dx/dlog(sigma)``."""
    x, mu, sigma, alpha, beta, u = _sample(mu, sigma, a, b, u)
    xs = (x - mu) / sigma
    # density ratios phi(bound) / phi(xs); infinite bounds contribute nothing
    with np.errstate(over="ignore", invalid="ignore"):
        ra = np.where(np.isfinite(alpha), np.exp(-0.5 * (alpha**2 - xs**2)), 0.0)
        rb = np.where(np.isfinite(beta), np.exp(-0.5 * (beta**2 - xs**2)), 0.0)
        aa = np.where(np.isfinite(alpha), alpha, 0.0)
        bb = np.where(np.isfinite(beta), beta, 0.0)
    dmu = 1.0 - ((1.0 - u) * ra + u * rb)
    dls = sigma * (xs - ((1.0 - u) * aa * ra + u * bb * rb))
    return x, dmu, dls


def trunc_normal_cdf(x, mu, sigma, a, b):
    mu, sigma, alpha, beta = _std_bounds(mu, sigma, a, b)
    return stats.truncnorm.cdf(x, alpha, beta, loc=mu, scale=sigma)


def _tail_ratios(alpha, beta):
    """``phi(alpha) / Z`` and ``phi(beta) / Z`` with ``Z = Phi(beta) - Phi(alpha)``.

    Assumes ``alpha < beta <= 0`` so that both bounds sit in the lower tail,
    where scaled complementary error functions avoid underflow.
    """
    r2 = 1.0 / np.sqrt(2.0)
    with np.errstate(over="ignore", invalid="ignore"):
        decay = np.exp(-0.5 * (alpha**2 - beta**2))
        hazard_b = np.sqrt(2.0 / np.pi) / erfcx(-beta * r2)
        cdf_ratio = np.where(np.isfinite(alpha), erfcx(-alpha * r2) / erfcx(-beta * r2) * decay, 0.0)
        denom = 1.0 - cdf_ratio
        ra = np.where(np.isfinite(alpha), hazard_b * decay / denom, 0.0)
    return ra, hazard_b / denom


def _moments(mu, sigma, alpha, beta):
    flip = alpha > 0
    lo = np.where(flip, -beta, alpha)
    hi = np.where(flip, -alpha, beta)
    tail = hi <= 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        z = ndtr(hi) - ndtr(lo)
        pdf = lambda t: np.where(np.isfinite(t), np.exp(-0.5 * t * t) / np.sqrt(2 * np.pi), 0.0)  # noqa: E731
        ra_t, rb_t = _tail_ratios(np.where(tail, lo, -1.0), np.where(tail, hi, 0.0))
        ra = np.where(tail, ra_t, pdf(lo) / z)
        rb = np.where(tail, rb_t, pdf(hi) / z)
        lo_term = np.where(np.isfinite(lo), lo * ra, 0.0)
        hi_term = np.where(np.isfinite(hi), hi * rb, 0.0)
    shift = ra - rb
    var = 1.0 + lo_term - hi_term - shift * shift
    mean = mu + sigma * np.where(flip, -shift, shift)
    return mean, sigma * np.sqrt(np.maximum(var, 0.0))


def trunc_normal_summary(mu, sigma, a, b, quantiles=(0.05, 0.95)):
    """Mean, standard deviation and quantiles of ``TN_[a,b](mu, sigma^2)``.

    Moments use tail-stable closed forms; quantiles come from
    :mod:`scipy.stats`.
    """
    mu, sigma, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mu, sigma, a, b)))
    mu, sigma, alpha, beta = _std_bounds(mu, sigma, a, b)
    mean, std = _moments(mu, sigma, alpha, beta)
    dist = stats.truncnorm(alpha, beta, loc=mu, scale=sigma)
    qs = [np.clip(dist.ppf(q), a, b) for q in quantiles]
    return np.clip(mean, a, b), std, qs
