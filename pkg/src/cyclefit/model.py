"""Parameter types, priors, mean curves and the joint log-posterior.

Each series is modeled as a trend plus (in the periodic model) a damped
cosine:

    y(t) = a + b*t + c*min(t - d, 0)^2 + amp*cos(mu*t + psi + phi)*exp(-lam*t) + noise

with per-series Gaussian noise variance sigma2 drawn from a per-experiment
scaled inverse chi-square hierarchy.  The trend-only null model drops the
cosine term.  Angles live on [-pi, pi); amp, d, mu and lam live on bounded
supports set by the prior constants.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .dataset import TimeSeriesMatrix
from .distributions import (
    LOG_TWO_PI,
    normal_logpdf,
    scaled_inv_chi2_logpdf,
    truncexp_logpdf,
    truncnorm_logpdf,
    wrap_angle,
)

PI = math.pi


class Model(str, enum.Enum):
    """M1 fits the damped cosine; M0 is the trend-only null."""

    M0 = "m0"
    M1 = "m1"


@dataclass(frozen=True)
class PriorConstants:
    """Constants of the proper, diffuse priors.

    c1..c3: variances of the trend coefficients (intercept, slope, release
    magnitude); c4: upper bound of the release end time d (minutes);
    c5: rate of the amplitude prior; c6: amplitude upper bound; c7/c8:
    angular-frequency bounds; c9/c10: experiment-phase prior variances
    (first experiment / others); c11: damping upper bound; c12: noise
    hierarchy degrees of freedom; c13: rate of the noise-scale prior.
    """

    c1: float = 1.0
    c2: float = 0.005 ** 2
    c3: float = 0.0001 ** 2
    c4: float = 500.0
    c5: float = 10.0
    c6: float = 10.0
    c7: float = 2.0 * PI / 180.0
    c8: float = 2.0 * PI / 120.0
    c9: float = 0.2 ** 2
    c10: float = 1.0
    c11: float = 0.006
    c12: float = 4.0
    c13: float = 50.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"prior constant {f.name.upper()} must be positive")
        if self.c7 >= self.c8:
            raise ValueError("C7 must be below C8")

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConstants":
        kwargs = {}
        for f in fields(cls):
            key = f.name.upper()
            if key in d:
                kwargs[f.name] = float(d[key])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {f.name.upper(): getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class ExperimentParams:
    """Experiment-level globals: angular frequency, phase, damping, noise scale."""

    mu: float
    psi: float
    lam: float
    zeta: float

    def validate(self, consts: PriorConstants) -> None:
        if not consts.c7 <= self.mu < consts.c8:
            raise ValueError(f"mu={self.mu} outside [{consts.c7}, {consts.c8})")
        if not -PI <= self.psi < PI:
            raise ValueError(f"psi={self.psi} outside [-pi, pi)")
        if not 0.0 <= self.lam < consts.c11:
            raise ValueError(f"lam={self.lam} outside [0, {consts.c11})")
        if self.zeta <= 0.0:
            raise ValueError("zeta must be positive")


@dataclass(frozen=True)
class CellParams:
    """Series-level parameters: trend (a + b*t + c*min(t-d,0)^2), amplitude,
    noise variance."""

    a: float
    b: float
    c: float
    d: float
    amp: float
    sigma2: float

    def validate(self, consts: PriorConstants) -> None:
        if not 0.0 <= self.d < consts.c4:
            raise ValueError(f"d={self.d} outside [0, {consts.c4})")
        if not 0.0 <= self.amp < consts.c6:
            raise ValueError(f"amp={self.amp} outside [0, {consts.c6})")
        if self.sigma2 <= 0.0:
            raise ValueError("sigma2 must be positive")


# A gene's phase is a bare angle in [-pi, pi).
GenePhase = float


@dataclass
class ChainState:
    """Full parameter assignment for one MCMC iteration.

    Experiment-level arrays have shape (E,), ``phi`` has shape (G,), and the
    series-level arrays have shape (G, E).
    """

    mu: np.ndarray
    psi: np.ndarray
    lam: np.ndarray
    zeta: np.ndarray
    phi: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    amp: np.ndarray
    sigma2: np.ndarray
    log_posterior: float = float("nan")

    _CELL_FIELDS = ("a", "b", "c", "d", "amp", "sigma2")
    _EXP_FIELDS = ("mu", "psi", "lam", "zeta")

    @property
    def n_genes(self) -> int:
        return self.phi.size

    @property
    def n_experiments(self) -> int:
        return self.mu.size

    @property
    def theta(self) -> list[ExperimentParams]:
        return [self.experiment_params(e) for e in range(self.n_experiments)]

    def experiment_params(self, e: int) -> ExperimentParams:
        return ExperimentParams(
            float(self.mu[e]), float(self.psi[e]), float(self.lam[e]), float(self.zeta[e])
        )

    def cell_params(self, g: int, e: int) -> CellParams:
        return CellParams(
            float(self.a[g, e]), float(self.b[g, e]), float(self.c[g, e]),
            float(self.d[g, e]), float(self.amp[g, e]), float(self.sigma2[g, e]),
        )

    def set_cell(self, g: int, e: int, cell: CellParams) -> None:
        self.a[g, e] = cell.a
        self.b[g, e] = cell.b
        self.c[g, e] = cell.c
        self.d[g, e] = cell.d
        self.amp[g, e] = cell.amp
        self.sigma2[g, e] = cell.sigma2

    def copy(self) -> "ChainState":
        return ChainState(
            self.mu.copy(), self.psi.copy(), self.lam.copy(), self.zeta.copy(),
            self.phi.copy(), self.a.copy(), self.b.copy(), self.c.copy(),
            self.d.copy(), self.amp.copy(), self.sigma2.copy(), self.log_posterior,
        )

    @classmethod
    def zeros(cls, n_genes: int, n_experiments: int, consts: PriorConstants) -> "ChainState":
        ge = (n_genes, n_experiments)
        return cls(
            mu=np.full(n_experiments, 0.5 * (consts.c7 + consts.c8)),
            psi=np.zeros(n_experiments),
            lam=np.zeros(n_experiments),
            zeta=np.ones(n_experiments),
            phi=np.zeros(n_genes),
            a=np.zeros(ge), b=np.zeros(ge), c=np.zeros(ge),
            d=np.full(ge, consts.c4 / 2.0),
            amp=np.zeros(ge),
            sigma2=np.ones(ge),
        )


# ---------------------------------------------------------------------------
# mean curves and likelihood
# ---------------------------------------------------------------------------

def trend_mean(cell: CellParams, t):
    """Trend component: linear drift plus the truncated quadratic that models
    the transient release artifact ending at time d."""
    t = np.asarray(t, dtype=float)
    return cell.a + cell.b * t + cell.c * np.minimum(t - cell.d, 0.0) ** 2


def periodic_mean(theta: ExperimentParams, phi: GenePhase, amp, t):
    t = np.asarray(t, dtype=float)
    return amp * np.cos(theta.mu * t + theta.psi + phi) * np.exp(-theta.lam * t)


def mean_m1(theta: ExperimentParams, phi: GenePhase, cell: CellParams, t):
    """Periodic-model mean value at time(s) t."""
    return trend_mean(cell, t) + periodic_mean(theta, phi, cell.amp, t)


def mean_m0(cell: CellParams, t):
    """Trend-only mean; equals mean_m1 with zero amplitude."""
    return trend_mean(cell, t)


def log_likelihood_cell(
    values, times, theta: ExperimentParams, phi: GenePhase, cell: CellParams,
    model: Model = Model.M1,
) -> float:
    """Gaussian log-likelihood of one series; NaN entries are skipped."""
    if cell.sigma2 <= 0.0:
        raise ValueError("sigma2 must be positive")
    values = np.asarray(values, dtype=float)
    times = np.asarray(times, dtype=float)
    if values.shape != times.shape:
        raise ValueError("values and times must have equal length")
    present = ~np.isnan(values)
    if not present.any():
        return 0.0
    y = values[present]
    t = times[present]
    mean = mean_m1(theta, phi, cell, t) if model == Model.M1 else mean_m0(cell, t)
    r = y - mean
    return float(-0.5 * y.size * (LOG_TWO_PI + math.log(cell.sigma2))
                 - 0.5 * np.dot(r, r) / cell.sigma2)


# ---------------------------------------------------------------------------
# priors and joint posterior
# ---------------------------------------------------------------------------

def _uniform_logpdf(x, lo, hi):
    x = np.asarray(x, dtype=float)
    return np.where((x >= lo) & (x < hi), -math.log(hi - lo), -np.inf)


def log_prior(state: ChainState, consts: PriorConstants) -> float:
    """Joint log-prior of a full state; -inf when any support bound is violated.

    Densities truncated to a finite interval (amplitude, experiment phases)
    are normalized over that interval.
    """
    k = consts
    if np.any(state.zeta <= 0.0) or np.any(state.sigma2 <= 0.0):
        return float("-inf")
    total = 0.0
    total += normal_logpdf(state.a, 0.0, k.c1).sum()
    total += normal_logpdf(state.b, 0.0, k.c2).sum()
    total += normal_logpdf(state.c, 0.0, k.c3).sum()
    total += _uniform_logpdf(state.d, 0.0, k.c4).sum()
    total += truncexp_logpdf(state.amp, k.c5, k.c6).sum()
    total += scaled_inv_chi2_logpdf(state.sigma2, k.c12, state.zeta[None, :]).sum()
    total += _uniform_logpdf(state.phi, -PI, PI).sum()
    total += _uniform_logpdf(state.mu, k.c7, k.c8).sum()
    sd9 = math.sqrt(k.c9)
    sd10 = math.sqrt(k.c10)
    total += float(truncnorm_logpdf(state.psi[0], 0.0, sd9, -PI, PI))
    if state.n_experiments > 1:
        total += truncnorm_logpdf(state.psi[1:], 0.0, sd10, -PI, PI).sum()
    total += _uniform_logpdf(state.lam, 0.0, k.c11).sum()
    total += float(np.sum(math.log(k.c13) - k.c13 * state.zeta))
    return float(total)


def log_likelihood(state: ChainState, matrix: TimeSeriesMatrix, model: Model = Model.M1) -> float:
    """Total Gaussian log-likelihood over all present observations."""
    total = 0.0
    for e, exp in enumerate(matrix.experiments):
        t = exp.times
        mean = (state.a[:, e, None] + state.b[:, e, None] * t[None, :]
                + state.c[:, e, None] * np.minimum(t[None, :] - state.d[:, e, None], 0.0) ** 2)
        if model == Model.M1:
            mean = mean + (state.amp[:, e, None]
                           * np.cos(state.mu[e] * t[None, :] + state.psi[e]
                                    + state.phi[:, None])
                           * np.exp(-state.lam[e] * t[None, :]))
        resid2 = np.where(exp.present, (exp.values - mean) ** 2, 0.0)
        m = exp.present.sum(axis=1)
        sigma2 = state.sigma2[:, e]
        total += float(-0.5 * np.sum(m * (LOG_TWO_PI + np.log(sigma2)))
                       - 0.5 * np.sum(resid2.sum(axis=1) / sigma2))
    return total


def log_posterior(
    state: ChainState, matrix: TimeSeriesMatrix, consts: PriorConstants,
    model: Model = Model.M1,
) -> float:
    """Joint log-density of data and parameters (up to the data's constant)."""
    lp = log_prior(state, consts)
    if not np.isfinite(lp):
        return float("-inf")
    return lp + log_likelihood(state, matrix, model)


def apply_phase_gauge(state: ChainState, z: float) -> ChainState:
    """Shift all experiment phases by +z and all gene phases by -z (wrapped).

    The likelihood is invariant under this transform; only the experiment
    phase priors change.
    """
    out = state.copy()
    out.psi = wrap_angle(state.psi + z)
    out.phi = wrap_angle(state.phi - z)
    return out


def new_cell(cell: CellParams, **changes) -> CellParams:
    return replace(cell, **changes)
