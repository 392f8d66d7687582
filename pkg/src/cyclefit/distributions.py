"""Low-level densities and samplers shared by the model and the MCMC kernels.

Everything here is parameterized explicitly (variances, rates, bounds) and
operates on plain floats or numpy arrays.  Draws go through a
``numpy.random.Generator`` so different parts of a run can hold independent
substreams.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln, log_ndtr, ndtr, ndtri

TWO_PI = 2.0 * math.pi
LOG_TWO_PI = math.log(TWO_PI)

# Standardized bound beyond which the inverse-CDF path loses resolution and
# we switch to one-sided exponential rejection (Robert-style).
_TAIL_SWITCH = 5.0


def wrap_angle(x):
    """Map angles to [-pi, pi); works on scalars and arrays."""
    return np.mod(np.asarray(x) + math.pi, TWO_PI) - math.pi


def circular_mean(angles) -> float:
    """Mean direction of a sample of angles, in [-pi, pi)."""
    a = np.asarray(angles, dtype=float)
    return float(np.arctan2(np.sin(a).sum(), np.cos(a).sum()))


def normal_logpdf(x, mean, var):
    """Gaussian log-density with variance parameterization."""
    return -0.5 * (LOG_TWO_PI + np.log(var) + (x - mean) ** 2 / var)


# ---------------------------------------------------------------------------
# truncated normal
# ---------------------------------------------------------------------------

def _interval_log_mass(alpha, beta):
    """log P(alpha < Z < beta) for standard normal Z, stable in far tails."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    # Work in the tail with less mass: reflect so that alpha' = -beta <= -alpha.
    flip = alpha > 0.0
    lo = np.where(flip, -beta, alpha)
    hi = np.where(flip, -alpha, beta)
    plain = ndtr(hi) - ndtr(lo)
    with np.errstate(divide="ignore"):
        log_plain = np.where(plain > 0.0, np.log(np.maximum(plain, 1e-300)), -np.inf)
    # Underflow fallback: log(Phi(hi) - Phi(lo)) via log_ndtr difference.
    tiny = plain < 1e-280
    if np.any(tiny):
        lh = log_ndtr(np.where(tiny, hi, 0.0))
        ll = log_ndtr(np.where(tiny, lo, 0.0))
        diff = -np.expm1(np.minimum(ll - lh, 0.0))
        log_tiny = lh + np.log(np.maximum(diff, 1e-300))
        log_plain = np.where(tiny, log_tiny, log_plain)
    return log_plain


def truncnorm_logpdf(x, mean, sd, lo, hi):
    """Log-density of N(mean, sd^2) truncated to [lo, hi), normalized."""
    x = np.asarray(x, dtype=float)
    alpha = (lo - mean) / sd
    beta = (hi - mean) / sd
    z = (x - mean) / sd
    out = -0.5 * (LOG_TWO_PI + z * z) - np.log(sd) - _interval_log_mass(alpha, beta)
    return np.where((x >= lo) & (x < hi), out, -np.inf)


def _truncstd_tail_draw(rng: np.random.Generator, a: float, b: float) -> float:
    """Standard normal truncated to [a, b] with a >= _TAIL_SWITCH, by rejection."""
    lam = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        z = a + rng.exponential(1.0 / lam)
        if z >= b:
            continue
        if math.log(rng.uniform()) <= -0.5 * (z - lam) ** 2:
            return z


def _truncstd_draw(rng: np.random.Generator, a: float, b: float) -> float:
    if a >= _TAIL_SWITCH:
        return _truncstd_tail_draw(rng, a, b)
    if b <= -_TAIL_SWITCH:
        return -_truncstd_tail_draw(rng, -b, -a)
    fa = ndtr(a)
    fb = ndtr(b)
    u = rng.uniform(fa, fb)
    return float(ndtri(u))


def truncnorm_rvs(rng: np.random.Generator, mean, sd, lo, hi):
    """Draw from N(mean, sd^2) truncated to [lo, hi).

    Scalar parameters give a scalar; array parameters broadcast and give an
    array (element-wise inverse-CDF with a rejection fallback deep in a tail).
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if mean.ndim == 0 and sd.ndim == 0:
        a = (lo - float(mean)) / float(sd)
        b = (hi - float(mean)) / float(sd)
        return float(mean) + float(sd) * _truncstd_draw(rng, a, b)
    mean, sd = np.broadcast_arrays(mean, sd)
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    out = np.empty(mean.shape, dtype=float)
    flat_a = a.ravel()
    flat_b = b.ravel()
    flat = out.ravel()
    in_core = (flat_a < _TAIL_SWITCH) & (flat_b > -_TAIL_SWITCH)
    # One uniform per element keeps stream use independent of tail handling.
    u = rng.uniform(size=flat.size)
    fa = ndtr(flat_a[in_core])
    fb = ndtr(flat_b[in_core])
    flat[in_core] = ndtri(fa + u[in_core] * (fb - fa))
    for i in np.nonzero(~in_core)[0]:
        flat[i] = _truncstd_draw(rng, flat_a[i], flat_b[i])
    return mean + sd * out


# ---------------------------------------------------------------------------
# truncated exponential
# ---------------------------------------------------------------------------

def truncexp_logpdf(x, rate, hi):
    """Log-density of Exp(rate) truncated to [0, hi), normalized."""
    x = np.asarray(x, dtype=float)
    log_norm = math.log(rate) - np.log(-np.expm1(-rate * hi))
    return np.where((x >= 0.0) & (x < hi), log_norm - rate * x, -np.inf)


def truncexp_rvs(rng: np.random.Generator, rate: float, hi: float, size=None):
    """Inverse-CDF draw from Exp(rate) truncated to [0, hi)."""
    u = rng.uniform(size=size)
    return -np.log1p(u * np.expm1(-rate * hi)) / rate


# ---------------------------------------------------------------------------
# scaled inverse chi-square
# ---------------------------------------------------------------------------

def scaled_inv_chi2_logpdf(x, df, scale):
    """Log-density of the scaled inverse chi-square with df degrees of freedom
    and scale parameter ``scale`` (density ~ x^-(df/2+1) exp(-df*scale/(2x)))."""
    x = np.asarray(x, dtype=float)
    h = 0.5 * df
    out = h * np.log(h * scale) - gammaln(h) - (h + 1.0) * np.log(x) - h * scale / x
    return np.where(x > 0.0, out, -np.inf)


def scaled_inv_chi2_rvs(rng: np.random.Generator, df, scale, size=None):
    """Draw via df*scale / chi2(df)."""
    return df * scale / rng.chisquare(df, size=size)


def scaled_inv_chi2_mean(df, scale):
    """Analytic mean, defined for df > 2."""
    return df * scale / (df - 2.0)


# ---------------------------------------------------------------------------
# seeded substreams
# ---------------------------------------------------------------------------

# Namespace tags keep cell-level, experiment-level and global streams disjoint
# even when gene/experiment indices collide with the tags.
_NS_CELL = 0
_NS_EXPERIMENT = 1
_NS_GLOBAL = 2


def cell_rng(seed: int, gene: int, experiment: int) -> np.random.Generator:
    return np.random.default_rng([_NS_CELL, seed, gene, experiment])


def experiment_rng(seed: int, experiment: int) -> np.random.Generator:
    return np.random.default_rng([_NS_EXPERIMENT, seed, experiment])


def global_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([_NS_GLOBAL, seed])
