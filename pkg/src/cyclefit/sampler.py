"""Metropolis-within-Gibbs sampler for the periodicity model.

One sweep updates, in order: experiment-level parameters (random-walk MH for
frequency, phase and damping; conjugate Gamma for the noise scale), gene
phases (wrapped random-walk MH), and series-level parameters (conjugate
trivariate normal for the trend, random-walk MH for the release end time,
truncated-normal conjugate draw for the amplitude, scaled inverse chi-square
for the noise variance).  Scheduled group moves improve mixing: a phase-gauge
shift along the non-identifiable direction, and three Metropolized
independence group moves that jointly repropose strongly correlated blocks
(gene phase with its amplitudes, release time with its trend coefficients,
damping with all amplitudes of an experiment).

Random numbers come from a global stream for experiment/gene-level updates
and group moves, and from per-(gene, experiment) substreams for series-level
updates, so the series loop can run on any number of workers with
bit-identical results.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import TimeSeriesMatrix
from .distributions import (
    LOG_TWO_PI,
    cell_rng,
    global_rng,
    truncexp_logpdf,
    truncexp_rvs,
    truncnorm_logpdf,
    truncnorm_rvs,
    wrap_angle,
)
from .model import (
    ChainState,
    Model,
    PI,
    PriorConstants,
    log_likelihood_cell,
    log_posterior,
    log_prior,
)

# Denominator below which a least-squares amplitude estimate is undefined.
_LS_EPS = 1e-300


class ChainInitError(RuntimeError):
    """Raised when the initial state has a non-finite log-posterior."""


@dataclass
class SamplerConfig:
    """Run-length, seeding, proposal widths and group-move schedule.

    Step sizes left as None resolve to defaults derived from the prior
    constants: (C8-C7)/20 for the frequency, C11/20 for the damping and
    C4/20 for the release time.  ``mips_every`` / ``gauge_every`` give the
    sweep period of the group moves; 0 disables a move.
    """

    iterations: int
    burn_in: int = 0
    thinning: int = 1
    seed: int = 0
    step_mu: float | None = None
    step_psi: float = 0.3
    step_phi: float = 0.3
    step_lam: float | None = None
    step_d: float | None = None
    step_gauge: float = 0.3
    mips_every: int = 10
    gauge_every: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.mips_every < 0 or self.gauge_every < 0:
            raise ValueError("move periods must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def resolved_steps(self, consts: PriorConstants) -> dict[str, float]:
        return {
            "mu": self.step_mu if self.step_mu is not None else (consts.c8 - consts.c7) / 20.0,
            "psi": self.step_psi,
            "phi": self.step_phi,
            "lam": self.step_lam if self.step_lam is not None else consts.c11 / 20.0,
            "d": self.step_d if self.step_d is not None else consts.c4 / 20.0,
            "gauge": self.step_gauge,
        }

    _KEYS = {
        "iterations": ("iterations", int),
        "burn_in": ("burn_in", int),
        "thinning": ("thinning", int),
        "seed": ("seed", int),
        "step.mu": ("step_mu", float),
        "step.psi": ("step_psi", float),
        "step.phi": ("step_phi", float),
        "step.lambda": ("step_lam", float),
        "step.d": ("step_d", float),
        "step.gauge": ("step_gauge", float),
        "mips.every": ("mips_every", int),
        "gauge.every": ("gauge_every", int),
        "workers": ("workers", int),
    }

    @classmethod
    def from_dict(cls, d: dict, **overrides) -> "SamplerConfig":
        kwargs = {}
        for key, (name, conv) in cls._KEYS.items():
            if key in d:
                kwargs[name] = conv(d[key])
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class ChainTrace:
    """Retained states plus per-iteration bookkeeping for one chain."""

    states: list[ChainState]
    kept_iterations: list[int]
    log_posterior_series: np.ndarray
    acceptance: dict[str, list[int]]  # move -> [accepted, proposed]
    config: SamplerConfig
    model: Model

    def acceptance_rate(self, move: str) -> float:
        acc, tot = self.acceptance[move]
        return acc / tot if tot else float("nan")


def posterior_mode(trace: ChainTrace) -> ChainState:
    """Retained state with the highest log-posterior (earliest on ties)."""
    if not trace.states:
        raise ValueError("empty trace has no posterior mode")
    best = int(np.argmax([s.log_posterior for s in trace.states]))
    return trace.states[best]


# ---------------------------------------------------------------------------
# prepared data layout
# ---------------------------------------------------------------------------

class PreparedExperiment:
    """Per-experiment arrays in the layout the kernels want."""

    __slots__ = ("name", "times", "values0", "maskf", "present", "counts",
                 "present_idx", "t_cells", "y_cells")

    def __init__(self, exp):
        self.name = exp.name
        self.times = exp.times
        self.present = exp.present
        self.values0 = np.where(self.present, exp.values, 0.0)
        self.maskf = self.present.astype(float)
        self.counts = self.present.sum(axis=1)
        self.present_idx = [np.nonzero(self.present[g])[0] for g in range(exp.values.shape[0])]
        self.t_cells = [self.times[idx] for idx in self.present_idx]
        self.y_cells = [exp.values[g, idx] for g, idx in enumerate(self.present_idx)]

    def trend_matrix(self, state: ChainState, e: int) -> np.ndarray:
        t = self.times[None, :]
        return (state.a[:, e, None] + state.b[:, e, None] * t
                + state.c[:, e, None] * np.minimum(t - state.d[:, e, None], 0.0) ** 2)

    def carrier_matrix(self, state: ChainState, e: int) -> np.ndarray:
        t = self.times[None, :]
        return (np.cos(state.mu[e] * t + state.psi[e] + state.phi[:, None])
                * np.exp(-state.lam[e] * t))


class PreparedMatrix:
    __slots__ = ("experiments", "n_genes")

    def __init__(self, matrix: TimeSeriesMatrix):
        self.experiments = [PreparedExperiment(exp) for exp in matrix.experiments]
        self.n_genes = matrix.n_genes


# ---------------------------------------------------------------------------
# update contexts
# ---------------------------------------------------------------------------

@dataclass
class CellContext:
    """Everything a series-level kernel needs: the present observations, the
    current parameters, and the cosine carrier evaluated at those points."""

    t: np.ndarray
    y: np.ndarray
    carrier: np.ndarray
    a: float
    b: float
    c: float
    d: float
    amp: float
    sigma2: float
    zeta: float
    consts: PriorConstants
    rng: np.random.Generator

    def trend(self, d: float | None = None) -> np.ndarray:
        dd = self.d if d is None else d
        return self.a + self.b * self.t + self.c * np.minimum(self.t - dd, 0.0) ** 2

    def residual(self) -> np.ndarray:
        return self.y - self.trend() - self.amp * self.carrier


@dataclass
class ExperimentContext:
    """Shared-parameter kernels view one experiment: trend-removed data for
    all genes plus the current experiment-level values."""

    times: np.ndarray
    detrended: np.ndarray  # (G, S), zero at absent points
    maskf: np.ndarray
    sigma2: np.ndarray  # (G,)
    amp: np.ndarray  # (G,)
    phi: np.ndarray  # (G,)
    mu: float
    psi: float
    lam: float
    zeta: float
    is_first: bool
    consts: PriorConstants
    rng: np.random.Generator

    def sum_sq(self, mu=None, psi=None, lam=None, amp=None) -> float:
        """Sum over genes of the residual sum of squares / (2 sigma2)."""
        mu = self.mu if mu is None else mu
        psi = self.psi if psi is None else psi
        lam = self.lam if lam is None else lam
        amp = self.amp if amp is None else amp
        t = self.times[None, :]
        carrier = np.cos(mu * t + psi + self.phi[:, None]) * np.exp(-lam * t)
        resid = (self.detrended - amp[:, None] * carrier) * self.maskf
        rss = np.einsum("gs,gs->g", resid, resid)
        return float(np.sum(rss / (2.0 * self.sigma2)))


@dataclass
class GeneContext:
    """Gene-phase kernels view one gene across experiments."""

    t: list[np.ndarray]  # present times per experiment
    detrended: list[np.ndarray]  # per experiment, present points only
    amp: np.ndarray  # (E,)
    sigma2: np.ndarray  # (E,)
    mu: np.ndarray
    psi: np.ndarray
    lam: np.ndarray
    phi: float
    consts: PriorConstants
    rng: np.random.Generator

    def carriers(self, phi: float) -> list[np.ndarray]:
        return [np.cos(self.mu[e] * t + self.psi[e] + phi) * np.exp(-self.lam[e] * t)
                for e, t in enumerate(self.t)]

    def neg_half_rss(self, phi: float, amp=None) -> float:
        amp = self.amp if amp is None else amp
        total = 0.0
        for e, t in enumerate(self.t):
            if t.size == 0:
                continue
            w = np.cos(self.mu[e] * t + self.psi[e] + phi) * np.exp(-self.lam[e] * t)
            r = self.detrended[e] - amp[e] * w
            total -= np.dot(r, r) / (2.0 * self.sigma2[e])
        return total


# ---------------------------------------------------------------------------
# series-level kernels
# ---------------------------------------------------------------------------

def _design(t: np.ndarray, d: float) -> np.ndarray:
    """Trend regressors: intercept, time, squared pre-release ramp."""
    return np.column_stack((np.ones_like(t), t, np.minimum(t - d, 0.0) ** 2))


class _Normal3:
    """Trivariate normal in precision form with a scalar 3x3 Cholesky.

    LAPACK round-trips dominate the sweep cost at this size, so the factor
    and the solves are written out by hand.
    """

    __slots__ = ("mean", "l11", "l21", "l31", "l22", "l32", "l33")

    def __init__(self, p11, p21, p31, p22, p32, p33, r1, r2, r3):
        l11 = math.sqrt(p11)
        l21 = p21 / l11
        l31 = p31 / l11
        l22 = math.sqrt(p22 - l21 * l21)
        l32 = (p32 - l31 * l21) / l22
        l33 = math.sqrt(p33 - l31 * l31 - l32 * l32)
        # forward/back substitution for the mean
        w1 = r1 / l11
        w2 = (r2 - l21 * w1) / l22
        w3 = (r3 - l31 * w1 - l32 * w2) / l33
        m3 = w3 / l33
        m2 = (w2 - l32 * m3) / l22
        m1 = (w1 - l21 * m2 - l31 * m3) / l11
        self.mean = (m1, m2, m3)
        self.l11, self.l21, self.l31 = l11, l21, l31
        self.l22, self.l32, self.l33 = l22, l32, l33

    def draw(self, rng) -> tuple[float, float, float]:
        z1, z2, z3 = rng.standard_normal(3)
        x3 = z3 / self.l33
        x2 = (z2 - self.l32 * x3) / self.l22
        x1 = (z1 - self.l21 * x2 - self.l31 * x3) / self.l11
        m1, m2, m3 = self.mean
        return m1 + x1, m2 + x2, m3 + x3

    def logpdf(self, x1, x2, x3) -> float:
        m1, m2, m3 = self.mean
        d1, d2, d3 = x1 - m1, x2 - m2, x3 - m3
        u1 = self.l11 * d1 + self.l21 * d2 + self.l31 * d3
        u2 = self.l22 * d2 + self.l32 * d3
        u3 = self.l33 * d3
        logdet = 2.0 * math.log(self.l11 * self.l22 * self.l33)
        return 0.5 * logdet - 1.5 * LOG_TWO_PI - 0.5 * (u1 * u1 + u2 * u2 + u3 * u3)

    def precision(self) -> np.ndarray:
        L = np.array([[self.l11, 0.0, 0.0],
                      [self.l21, self.l22, 0.0],
                      [self.l31, self.l32, self.l33]])
        return L @ L.T


def _trend_normal(ctx: CellContext, d: float) -> _Normal3:
    k = ctx.consts
    t = ctx.t
    if t.size:
        q = np.minimum(t - d, 0.0)
        q = q * q
        z = ctx.y - ctx.amp * ctx.carrier
        inv = 1.0 / ctx.sigma2
        p11 = t.size * inv + 1.0 / k.c1
        p21 = t.sum() * inv
        p31 = q.sum() * inv
        p22 = float(t @ t) * inv + 1.0 / k.c2
        p32 = float(t @ q) * inv
        p33 = float(q @ q) * inv + 1.0 / k.c3
        r1 = z.sum() * inv
        r2 = float(t @ z) * inv
        r3 = float(q @ z) * inv
        return _Normal3(p11, p21, p31, p22, p32, p33, r1, r2, r3)
    return _Normal3(1.0 / k.c1, 0.0, 0.0, 1.0 / k.c2, 0.0, 1.0 / k.c3, 0.0, 0.0, 0.0)


def trend_conditional(ctx: CellContext, d: float | None = None):
    """Mean and precision matrix of the conjugate normal for (a, b, c)."""
    n = _trend_normal(ctx, ctx.d if d is None else d)
    return np.array(n.mean), n.precision()


def gibbs_trend(ctx: CellContext) -> np.ndarray:
    """Exact draw of (a, b, c) from its conjugate trivariate normal; with no
    present observations this is a draw from the prior."""
    return np.array(_trend_normal(ctx, ctx.d).draw(ctx.rng))


def mh_block_end(ctx: CellContext, step: float) -> tuple[float, bool]:
    """Random-walk MH for the release end time d on [0, C4)."""
    d_new = ctx.d + step * ctx.rng.standard_normal()
    if not 0.0 <= d_new < ctx.consts.c4:
        return ctx.d, False
    base = ctx.y - ctx.amp * ctx.carrier - ctx.a - ctx.b * ctx.t
    q_old = np.minimum(ctx.t - ctx.d, 0.0)
    q_new = np.minimum(ctx.t - d_new, 0.0)
    r_old = base - ctx.c * q_old * q_old
    r_new = base - ctx.c * q_new * q_new
    delta = (float(r_old @ r_old) - float(r_new @ r_new)) / (2.0 * ctx.sigma2)
    if math.log(ctx.rng.uniform()) < delta:
        return float(d_new), True
    return ctx.d, False


def amplitude_conditional(ctx: CellContext):
    """(mean, variance) of the untruncated normal conditional for the
    amplitude, or None when the carrier energy vanishes."""
    denom = float(ctx.carrier @ ctx.carrier)
    if denom <= _LS_EPS:
        return None
    detr = ctx.y - ctx.trend()
    mean = (float(ctx.carrier @ detr) - ctx.sigma2 * ctx.consts.c5) / denom
    return mean, ctx.sigma2 / denom


def gibbs_amplitude(ctx: CellContext) -> float:
    """Exact draw of the amplitude from its normal conditional truncated to
    [0, C6); falls back to the truncated-exponential prior when the carrier
    carries no energy at the present points."""
    cond = amplitude_conditional(ctx)
    if cond is None:
        return float(truncexp_rvs(ctx.rng, ctx.consts.c5, ctx.consts.c6))
    mean, var = cond
    return float(truncnorm_rvs(ctx.rng, mean, math.sqrt(var), 0.0, ctx.consts.c6))


def noise_conditional(ctx: CellContext) -> tuple[float, float]:
    """(df, scale) of the scaled inverse chi-square conditional for sigma2."""
    r = ctx.residual()
    df = ctx.t.size + ctx.consts.c12
    scale = (ctx.consts.c12 * ctx.zeta + float(np.dot(r, r))) / df
    return df, scale


def gibbs_noise(ctx: CellContext) -> float:
    df, scale = noise_conditional(ctx)
    return float(df * scale / ctx.rng.chisquare(df))


# ---------------------------------------------------------------------------
# experiment-level kernels
# ---------------------------------------------------------------------------

def mh_frequency(ectx: ExperimentContext, step: float) -> tuple[float, bool]:
    """Random-walk MH for the angular frequency on [C7, C8)."""
    mu_new = ectx.mu + step * ectx.rng.standard_normal()
    if not ectx.consts.c7 <= mu_new < ectx.consts.c8:
        return ectx.mu, False
    delta = ectx.sum_sq() - ectx.sum_sq(mu=mu_new)
    if math.log(ectx.rng.uniform()) < delta:
        return float(mu_new), True
    return ectx.mu, False


def mh_exp_phase(ectx: ExperimentContext, step: float) -> tuple[float, bool]:
    """Wrapped random-walk MH for the experiment phase; the prior variance is
    C9 for the first experiment and C10 for the others."""
    var = ectx.consts.c9 if ectx.is_first else ectx.consts.c10
    psi_new = float(wrap_angle(ectx.psi + step * ectx.rng.standard_normal()))
    delta = (ectx.sum_sq() - ectx.sum_sq(psi=psi_new)
             + (ectx.psi ** 2 - psi_new ** 2) / (2.0 * var))
    if math.log(ectx.rng.uniform()) < delta:
        return psi_new, True
    return ectx.psi, False


def mh_damping(ectx: ExperimentContext, step: float) -> tuple[float, bool]:
    """Random-walk MH for the damping rate on [0, C11)."""
    lam_new = ectx.lam + step * ectx.rng.standard_normal()
    if not 0.0 <= lam_new < ectx.consts.c11:
        return ectx.lam, False
    delta = ectx.sum_sq() - ectx.sum_sq(lam=lam_new)
    if math.log(ectx.rng.uniform()) < delta:
        return float(lam_new), True
    return ectx.lam, False


def zeta_conditional(sigma2: np.ndarray, consts: PriorConstants) -> tuple[float, float]:
    """(shape, rate) of the Gamma conditional for the noise scale."""
    shape = 0.5 * consts.c12 * sigma2.size + 1.0
    rate = 0.5 * consts.c12 * float(np.sum(1.0 / sigma2)) + consts.c13
    return shape, rate


def gibbs_zeta(sigma2: np.ndarray, consts: PriorConstants, rng) -> float:
    shape, rate = zeta_conditional(sigma2, consts)
    return float(rng.gamma(shape, 1.0 / rate))


# ---------------------------------------------------------------------------
# gene-level kernel
# ---------------------------------------------------------------------------

def mh_gene_phase(gctx: GeneContext, step: float) -> tuple[float, bool]:
    """Wrapped random-walk MH for a gene phase (flat prior)."""
    phi_new = float(wrap_angle(gctx.phi + step * gctx.rng.standard_normal()))
    delta = gctx.neg_half_rss(phi_new) - gctx.neg_half_rss(gctx.phi)
    if math.log(gctx.rng.uniform()) < delta:
        return phi_new, True
    return gctx.phi, False


# ---------------------------------------------------------------------------
# group moves
# ---------------------------------------------------------------------------

def gauge_log_ratio(psi: np.ndarray, z: float, consts: PriorConstants) -> float:
    """Log acceptance ratio of the phase-gauge move.  The likelihood and the
    flat gene-phase priors cancel; only the experiment-phase priors remain."""
    psi_new = wrap_angle(psi + z)
    delta = (psi[0] ** 2 - psi_new[0] ** 2) / (2.0 * consts.c9)
    if psi.size > 1:
        delta += float(np.sum(psi[1:] ** 2 - psi_new[1:] ** 2)) / (2.0 * consts.c10)
    return float(delta)


def group_move_phase_gauge(
    state: ChainState, consts: PriorConstants, rng, z_step: float
) -> tuple[bool, float]:
    """Propose shifting every experiment phase by +z and every gene phase by
    -z; accept by the prior ratio alone.  Mutates ``state`` when accepted."""
    z = z_step * rng.standard_normal()
    log_ratio = gauge_log_ratio(state.psi, z, consts)
    accepted = math.log(rng.uniform()) < log_ratio
    if accepted:
        state.psi = wrap_angle(state.psi + z)
        state.phi = wrap_angle(state.phi - z)
    return accepted, log_ratio


def _ls_amp_params(w: np.ndarray, detrended: np.ndarray, sigma2: float,
                   consts: PriorConstants) -> tuple[float, float]:
    """Center and sd of the truncated-normal amplitude proposal: the
    least-squares estimate and the conditional posterior sd.  A vanishing
    denominator centers the proposal at zero with a wide sd."""
    denom = float(np.dot(w, w))
    if denom <= _LS_EPS:
        return 0.0, consts.c6
    return float(np.dot(w, detrended)) / denom, math.sqrt(sigma2 / denom)


def _phase_amp_logq(gctx: GeneContext, phi: float, amps: np.ndarray) -> float:
    """Sequential proposal log-density of an (phi, amps) block given the
    proposal is centered at the least-squares fit under ``phi``."""
    total = -math.log(2.0 * PI)  # independence proposal for phi is uniform
    for e, w in enumerate(gctx.carriers(phi)):
        m, s = _ls_amp_params(w, gctx.detrended[e], float(gctx.sigma2[e]), gctx.consts)
        total += float(truncnorm_logpdf(amps[e], m, s, 0.0, gctx.consts.c6))
    return total


def _phase_amp_logtarget(gctx: GeneContext, phi: float, amps: np.ndarray) -> float:
    k = gctx.consts
    return gctx.neg_half_rss(phi, amps) + float(truncexp_logpdf(amps, k.c5, k.c6).sum())


def phase_amp_log_ratio(gctx: GeneContext, old: tuple[float, np.ndarray],
                        new: tuple[float, np.ndarray]) -> float:
    """Joint MH log-ratio for a (gene phase, amplitudes) block proposal."""
    return (_phase_amp_logtarget(gctx, new[0], new[1])
            + _phase_amp_logq(gctx, old[0], old[1])
            - _phase_amp_logtarget(gctx, old[0], old[1])
            - _phase_amp_logq(gctx, new[0], new[1]))


def mips_phase_amplitude(gctx: GeneContext) -> tuple[float, np.ndarray, bool]:
    """Metropolized independence group move: propose a fresh gene phase
    uniformly, re-propose every amplitude of the gene from a truncated normal
    centered at its least-squares estimate under the new phase, and accept or
    reject the whole block jointly."""
    k = gctx.consts
    phi_new = float(gctx.rng.uniform(-PI, PI))
    amps_new = np.empty_like(gctx.amp)
    for e, w in enumerate(gctx.carriers(phi_new)):
        m, s = _ls_amp_params(w, gctx.detrended[e], float(gctx.sigma2[e]), k)
        amps_new[e] = truncnorm_rvs(gctx.rng, m, s, 0.0, k.c6)
    log_ratio = phase_amp_log_ratio(gctx, (gctx.phi, gctx.amp), (phi_new, amps_new))
    if math.log(gctx.rng.uniform()) < log_ratio:
        return phi_new, amps_new, True
    return gctx.phi, gctx.amp.copy(), False


def _trend_logtarget(ctx: CellContext, abc: np.ndarray, d: float) -> float:
    k = ctx.consts
    r = (ctx.y - ctx.amp * ctx.carrier
         - (abc[0] + abc[1] * ctx.t + abc[2] * np.minimum(ctx.t - d, 0.0) ** 2))
    loglik = -float(np.dot(r, r)) / (2.0 * ctx.sigma2)
    logprior = -0.5 * (abc[0] ** 2 / k.c1 + abc[1] ** 2 / k.c2 + abc[2] ** 2 / k.c3)
    return loglik + logprior


def mips_trend(ctx: CellContext) -> tuple[np.ndarray, float, bool]:
    """Group move for the trend block: an independent uniform release time and
    the exact conjugate normal for (a, b, c) under it, accepted jointly."""
    k = ctx.consts
    d_new = float(ctx.rng.uniform(0.0, k.c4))
    cond_new = _trend_normal(ctx, d_new)
    abc_new = np.array(cond_new.draw(ctx.rng))
    abc_old = np.array([ctx.a, ctx.b, ctx.c])
    cond_old = _trend_normal(ctx, ctx.d)
    log_ratio = (_trend_logtarget(ctx, abc_new, d_new)
                 + cond_old.logpdf(ctx.a, ctx.b, ctx.c)
                 - _trend_logtarget(ctx, abc_old, ctx.d)
                 - cond_new.logpdf(*abc_new))
    if math.log(ctx.rng.uniform()) < log_ratio:
        return abc_new, d_new, True
    return abc_old, ctx.d, False


def _damping_amp_logq(ectx: ExperimentContext, amps: np.ndarray,
                      centers_sds: tuple[np.ndarray, np.ndarray]) -> float:
    m, s = centers_sds
    return float(truncnorm_logpdf(amps, m, s, 0.0, ectx.consts.c6).sum())


def _damping_ls_params(ectx: ExperimentContext, lam: float):
    """Vectorized least-squares centers/sds for all genes under ``lam``."""
    t = ectx.times[None, :]
    w = (np.cos(ectx.mu * t + ectx.psi + ectx.phi[:, None]) * np.exp(-lam * t)) * ectx.maskf
    denom = np.einsum("gs,gs->g", w, w)
    num = np.einsum("gs,gs->g", w, ectx.detrended)
    ok = denom > _LS_EPS
    centers = np.where(ok, num / np.where(ok, denom, 1.0), 0.0)
    sds = np.where(ok, np.sqrt(ectx.sigma2 / np.where(ok, denom, 1.0)), ectx.consts.c6)
    return centers, sds


def mips_damping_amplitude(ectx: ExperimentContext) -> tuple[float, np.ndarray, bool]:
    """Group move for (damping, all amplitudes of the experiment): propose the
    damping uniformly on its support, re-propose every gene's amplitude at its
    least-squares estimate under the new damping, accept the block jointly."""
    k = ectx.consts
    lam_new = float(ectx.rng.uniform(0.0, k.c11))
    centers_new = _damping_ls_params(ectx, lam_new)
    amps_new = truncnorm_rvs(ectx.rng, centers_new[0], centers_new[1], 0.0, k.c6)

    centers_old = _damping_ls_params(ectx, ectx.lam)
    prior_old = float(truncexp_logpdf(ectx.amp, k.c5, k.c6).sum())
    prior_new = float(truncexp_logpdf(amps_new, k.c5, k.c6).sum())
    log_ratio = (-ectx.sum_sq(lam=lam_new, amp=amps_new) + prior_new
                 + _damping_amp_logq(ectx, ectx.amp, centers_old)
                 + ectx.sum_sq() - prior_old
                 - _damping_amp_logq(ectx, amps_new, centers_new))
    if math.log(ectx.rng.uniform()) < log_ratio:
        return lam_new, amps_new, True
    return ectx.lam, ectx.amp.copy(), False


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

_SIGMA2_FLOOR = 1e-6
_SIGMA2_DEFAULT = 0.04  # prior-scale fallback for series with no data


def initial_state(matrix: TimeSeriesMatrix, consts: PriorConstants,
                  model: Model = Model.M1) -> ChainState:
    """Deterministic likelihood-informed start: ridge trend fit per series
    with the release time at mid-support, small amplitude, frequency at
    mid-support, noise from the fit residuals."""
    g_n, e_n = matrix.n_genes, matrix.n_experiments
    state = ChainState.zeros(g_n, e_n, consts)
    if model == Model.M1:
        state.amp[:] = 0.01
        state.lam[:] = 0.001
    d0 = consts.c4 / 2.0
    prior_prec = np.diag([1.0 / consts.c1, 1.0 / consts.c2, 1.0 / consts.c3])
    for e, exp in enumerate(matrix.experiments):
        present = exp.present
        for g in range(g_n):
            idx = np.nonzero(present[g])[0]
            if idx.size == 0:
                state.sigma2[g, e] = _SIGMA2_DEFAULT
                continue
            t = exp.times[idx]
            y = exp.values[g, idx]
            x = _design(t, d0)
            coef, *_ = np.linalg.lstsq(x, y, rcond=None)
            resid = y - x @ coef
            sigma2 = max(float(np.dot(resid, resid)) / idx.size, _SIGMA2_FLOOR)
            ridge = np.linalg.solve(x.T @ x / sigma2 + prior_prec, x.T @ y / sigma2)
            state.a[g, e], state.b[g, e], state.c[g, e] = ridge
            resid = y - x @ ridge
            state.sigma2[g, e] = max(float(np.dot(resid, resid)) / idx.size, _SIGMA2_FLOOR)
        state.zeta[e] = float(np.mean(state.sigma2[:, e]))
    return state


def _diagnose_nonfinite(state, matrix, consts, model) -> str:
    if not np.isfinite(log_prior(state, consts)):
        for name in ("a", "b", "c", "d", "amp", "sigma2", "phi", "mu", "psi", "lam", "zeta"):
            if not np.all(np.isfinite(getattr(state, name))):
                return f"prior({name})"
        return "prior(support violation)"
    for e in range(matrix.n_experiments):
        exp = matrix.experiments[e]
        for g in range(matrix.n_genes):
            ll = log_likelihood_cell(exp.values[g], exp.times, state.experiment_params(e),
                                     float(state.phi[g]), state.cell_params(g, e), model)
            if not np.isfinite(ll):
                return f"likelihood(gene={matrix.genes[g]}, experiment={exp.name})"
    return "unknown factor"


# ---------------------------------------------------------------------------
# the chain
# ---------------------------------------------------------------------------

def _theta_arrays(fixed_theta, n_experiments: int):
    if isinstance(fixed_theta, ChainState):
        return (fixed_theta.mu.copy(), fixed_theta.psi.copy(),
                fixed_theta.lam.copy(), fixed_theta.zeta.copy())
    seq = list(fixed_theta)
    if len(seq) != n_experiments:
        raise ValueError(f"fixed_theta has {len(seq)} entries for {n_experiments} experiments")
    return (np.array([p.mu for p in seq]), np.array([p.psi for p in seq]),
            np.array([p.lam for p in seq]), np.array([p.zeta for p in seq]))


def run_chain(
    matrix: TimeSeriesMatrix,
    consts: PriorConstants,
    config: SamplerConfig,
    model: Model = Model.M1,
    fixed_theta: Sequence | ChainState | None = None,
) -> ChainTrace:
    """Run one chain and return the thinned post-burn-in trace.

    With ``fixed_theta`` the experiment-level parameters are pinned (the
    control-fit protocol) and their updates are skipped.  Under the null
    model the periodic parameters are never sampled and amplitudes stay at
    zero.  The same (matrix, consts, config, model, fixed_theta) always
    produces bit-identical output, for any worker count.
    """
    model = Model(model)
    prepared = PreparedMatrix(matrix)
    g_n, e_n = matrix.n_genes, matrix.n_experiments
    steps = config.resolved_steps(consts)

    state = initial_state(matrix, consts, model)
    if fixed_theta is not None:
        state.mu, state.psi, state.lam, state.zeta = _theta_arrays(fixed_theta, e_n)

    lp0 = log_posterior(state, matrix, consts, model)
    if not np.isfinite(lp0):
        raise ChainInitError(
            "non-finite log-posterior at initialization; offending factor: "
            + _diagnose_nonfinite(state, matrix, consts, model)
        )
    state.log_posterior = lp0

    rng = global_rng(config.seed)
    cell_rngs = [[cell_rng(config.seed, g, e) for e in range(e_n)] for g in range(g_n)]

    periodic = model == Model.M1
    theta_free = fixed_theta is None
    moves = ["trend", "d", "noise"]
    if periodic:
        moves += ["amp", "phi"]
        if theta_free:
            moves += ["mu", "psi", "lam", "gauge", "mips_damping"]
        moves += ["mips_phase_amp"]
    if theta_free:
        moves += ["zeta"]
    moves += ["mips_trend"]
    acceptance = {m: [0, 0] for m in moves}

    def tally(move: str, accepted: bool) -> None:
        acceptance[move][0] += int(accepted)
        acceptance[move][1] += 1

    def experiment_context(e: int) -> ExperimentContext:
        pexp = prepared.experiments[e]
        detrended = (pexp.values0 - pexp.trend_matrix(state, e)) * pexp.maskf
        return ExperimentContext(
            times=pexp.times, detrended=detrended, maskf=pexp.maskf,
            sigma2=state.sigma2[:, e], amp=state.amp[:, e], phi=state.phi,
            mu=float(state.mu[e]), psi=float(state.psi[e]), lam=float(state.lam[e]),
            zeta=float(state.zeta[e]), is_first=e == 0, consts=consts, rng=rng,
        )

    def gene_context(g: int, detrended_mats) -> GeneContext:
        t_list, d_list = [], []
        for e in range(e_n):
            idx = prepared.experiments[e].present_idx[g]
            t_list.append(prepared.experiments[e].t_cells[g])
            d_list.append(detrended_mats[e][g, idx])
        return GeneContext(
            t=t_list, detrended=d_list, amp=state.amp[g], sigma2=state.sigma2[g],
            mu=state.mu, psi=state.psi, lam=state.lam, phi=float(state.phi[g]),
            consts=consts, rng=rng,
        )

    def detrended_matrices() -> list[np.ndarray]:
        return [(p.values0 - p.trend_matrix(state, e)) * p.maskf
                for e, p in enumerate(prepared.experiments)]

    def cell_context(g: int, e: int, carrier_mat: np.ndarray) -> CellContext:
        pexp = prepared.experiments[e]
        idx = pexp.present_idx[g]
        return CellContext(
            t=pexp.t_cells[g], y=pexp.y_cells[g], carrier=carrier_mat[g, idx],
            a=float(state.a[g, e]), b=float(state.b[g, e]), c=float(state.c[g, e]),
            d=float(state.d[g, e]), amp=float(state.amp[g, e]),
            sigma2=float(state.sigma2[g, e]), zeta=float(state.zeta[e]),
            consts=consts, rng=cell_rngs[g][e],
        )

    def update_cell(g: int, e: int, carrier_mat: np.ndarray) -> list[tuple[str, bool]]:
        ctx = cell_context(g, e, carrier_mat)
        tallies = [("trend", True)]
        abc = gibbs_trend(ctx)
        ctx.a, ctx.b, ctx.c = (float(abc[0]), float(abc[1]), float(abc[2]))
        ctx.d, acc_d = mh_block_end(ctx, steps["d"])
        tallies.append(("d", acc_d))
        if periodic:
            ctx.amp = gibbs_amplitude(ctx)
            tallies.append(("amp", True))
        ctx.sigma2 = gibbs_noise(ctx)
        tallies.append(("noise", True))
        state.a[g, e], state.b[g, e], state.c[g, e] = ctx.a, ctx.b, ctx.c
        state.d[g, e] = ctx.d
        state.amp[g, e] = ctx.amp
        state.sigma2[g, e] = ctx.sigma2
        return tallies

    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    states: list[ChainState] = []
    kept: list[int] = []
    lp_series = np.empty(config.iterations)

    try:
        for it in range(1, config.iterations + 1):
            # Step 1: experiment-level parameters.
            if theta_free:
                for e in range(e_n):
                    if periodic:
                        ectx = experiment_context(e)
                        state.mu[e], acc = mh_frequency(ectx, steps["mu"])
                        tally("mu", acc)
                        ectx.mu = float(state.mu[e])
                        state.psi[e], acc = mh_exp_phase(ectx, steps["psi"])
                        tally("psi", acc)
                        ectx.psi = float(state.psi[e])
                        state.lam[e], acc = mh_damping(ectx, steps["lam"])
                        tally("lam", acc)
                    state.zeta[e] = gibbs_zeta(state.sigma2[:, e], consts, rng)
                    tally("zeta", True)

            # Step 2: gene phases, updated simultaneously (they are mutually
            # independent given the rest; same kernel as mh_gene_phase).
            if periodic:
                dmats = detrended_matrices()
                z = rng.standard_normal(g_n)
                u = rng.uniform(size=g_n)
                phi_new = wrap_angle(state.phi + steps["phi"] * z)
                delta = np.zeros(g_n)
                for e, pexp in enumerate(prepared.experiments):
                    damp = np.exp(-state.lam[e] * pexp.times)[None, :]
                    arg = state.mu[e] * pexp.times[None, :] + state.psi[e]
                    w_old = np.cos(arg + state.phi[:, None]) * damp * pexp.maskf
                    w_new = np.cos(arg + phi_new[:, None]) * damp * pexp.maskf
                    amp_col = state.amp[:, e, None]
                    r_old = dmats[e] - amp_col * w_old
                    r_new = dmats[e] - amp_col * w_new
                    rss_old = np.einsum("gs,gs->g", r_old, r_old)
                    rss_new = np.einsum("gs,gs->g", r_new, r_new)
                    delta += (rss_old - rss_new) / (2.0 * state.sigma2[:, e])
                accept = np.log(u) < delta
                state.phi = np.where(accept, phi_new, state.phi)
                acceptance["phi"][0] += int(accept.sum())
                acceptance["phi"][1] += g_n

            # Step 3: series-level parameters (parallelizable).
            carriers = [p.carrier_matrix(state, e) for e, p in enumerate(prepared.experiments)]
            tasks = [(g, e) for e in range(e_n) for g in range(g_n)]
            if pool is None:
                results = [update_cell(g, e, carriers[e]) for g, e in tasks]
            else:
                results = list(pool.map(lambda ge: update_cell(ge[0], ge[1], carriers[ge[1]]), tasks))
            for tallies in results:
                for move, acc in tallies:
                    tally(move, acc)

            # Scheduled group moves.
            if periodic and theta_free and config.gauge_every and it % config.gauge_every == 0:
                acc, _ = group_move_phase_gauge(state, consts, rng, steps["gauge"])
                tally("gauge", acc)

            if config.mips_every and it % config.mips_every == 0:
                if periodic:
                    dmats = detrended_matrices()
                    for g in range(g_n):
                        gctx = gene_context(g, dmats)
                        phi_g, amps_g, acc = mips_phase_amplitude(gctx)
                        state.phi[g] = phi_g
                        state.amp[g] = amps_g
                        tally("mips_phase_amp", acc)
                carriers = [p.carrier_matrix(state, e) for e, p in enumerate(prepared.experiments)]
                for e in range(e_n):
                    for g in range(g_n):
                        ctx = cell_context(g, e, carriers[e])
                        ctx.rng = rng  # group moves run on the global stream
                        abc, d_new, acc = mips_trend(ctx)
                        state.a[g, e], state.b[g, e], state.c[g, e] = abc
                        state.d[g, e] = d_new
                        tally("mips_trend", acc)
                if periodic and theta_free:
                    for e in range(e_n):
                        ectx = experiment_context(e)
                        lam_e, amps_e, acc = mips_damping_amplitude(ectx)
                        state.lam[e] = lam_e
                        state.amp[:, e] = amps_e
                        tally("mips_damping", acc)

            state.log_posterior = log_posterior(state, matrix, consts, model)
            lp_series[it - 1] = state.log_posterior
            if it > config.burn_in and (it - config.burn_in) % config.thinning == 0:
                states.append(state.copy())
                kept.append(it)
    finally:
        if pool is not None:
            pool.shutdown()

    return ChainTrace(states, kept, lp_series, acceptance, config, model)
