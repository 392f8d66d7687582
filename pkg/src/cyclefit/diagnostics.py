"""Convergence and model-fit checks: chain autocorrelation / effective sample
size, residual autocorrelation at the posterior mode, and variance-reduction
comparison against permuted data."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import TimeSeriesMatrix
from .model import ChainState, Model, mean_m0, mean_m1


@dataclass
class AcfReport:
    series_id: str
    acf: np.ndarray  # lags 1..K
    ess: float
    flagged: bool = False  # constant series convention


def _acf(series: np.ndarray, max_lag: int) -> np.ndarray | None:
    x = np.asarray(series, dtype=float)
    x = x - x.mean()
    denom = float(x @ x)
    if denom == 0.0:
        return None
    n = x.size
    return np.array([float(x[:-k] @ x[k:]) / denom for k in range(1, max_lag + 1)])


def trace_acf(series: np.ndarray, max_lag: int) -> AcfReport:
    """Autocorrelation of a chain scalar (biased estimator) and the matching
    effective sample size: N / (1 + 2 * sum of leading positive lags).

    A constant series has no autocorrelation structure; by convention its
    ESS is N and the report is flagged.
    """
    series = np.asarray(series, dtype=float)
    n = series.size
    if n <= max_lag:
        raise ValueError("series must be longer than max_lag")
    acf = _acf(series, max_lag)
    if acf is None:
        return AcfReport("trace", np.zeros(max_lag), float(n), flagged=True)
    first_nonpos = np.nonzero(acf <= 0.0)[0]
    cut = int(first_nonpos[0]) if first_nonpos.size else max_lag
    ess = n / (1.0 + 2.0 * float(acf[:cut].sum()))
    return AcfReport("trace", acf, float(ess))


def residual_acf(
    matrix: TimeSeriesMatrix, mode_state: ChainState, model: Model = Model.M1,
    min_points: int = 8,
) -> list[AcfReport]:
    """Lag-1 autocorrelation of each series' residuals at the posterior mode.

    Series with fewer than ``min_points`` present observations, or with
    degenerate residuals, are skipped (flagged report with NaN).
    """
    reports: list[AcfReport] = []
    for e, exp in enumerate(matrix.experiments):
        theta = mode_state.experiment_params(e)
        for g in range(matrix.n_genes):
            sid = f"{matrix.genes[g]}/{exp.name}"
            present = exp.present[g]
            if int(present.sum()) < min_points:
                reports.append(AcfReport(sid, np.array([np.nan]), float("nan"), True))
                continue
            t = exp.times[present]
            y = exp.values[g, present]
            cell = mode_state.cell_params(g, e)
            mean = (mean_m1(theta, float(mode_state.phi[g]), cell, t)
                    if model == Model.M1 else mean_m0(cell, t))
            resid = y - mean
            acf1 = _acf(resid, 1)
            if acf1 is None:
                reports.append(AcfReport(sid, np.array([np.nan]), float("nan"), True))
                continue
            reports.append(AcfReport(sid, acf1, float("nan")))
    return reports


@dataclass
class VarianceReductionRow:
    gene: str
    experiment: str
    real: float  # clipped to [0, 1]
    permuted: float
    real_raw: float
    permuted_raw: float


def _explained_fraction(values, times, theta, phi, cell) -> float | None:
    present = ~np.isnan(values)
    y = values[present]
    if y.size < 2:
        return None
    var = float(y.var())
    if var == 0.0:
        return None
    resid = y - mean_m1(theta, phi, cell, times[present])
    return 1.0 - float(resid.var()) / var


def variance_reduction(
    matrix: TimeSeriesMatrix,
    permuted: TimeSeriesMatrix,
    mode_real: ChainState,
    mode_permuted: ChainState,
) -> list[VarianceReductionRow]:
    """Fraction of each series' variance explained by the fitted mean curve,
    paired real vs permuted.  Raw values may be negative; the clipped columns
    floor them at zero.  Zero-variance series are skipped."""
    rows: list[VarianceReductionRow] = []
    for e, (exp_r, exp_p) in enumerate(zip(matrix.experiments, permuted.experiments)):
        theta_r = mode_real.experiment_params(e)
        theta_p = mode_permuted.experiment_params(e)
        for g in range(matrix.n_genes):
            fr = _explained_fraction(exp_r.values[g], exp_r.times, theta_r,
                                     float(mode_real.phi[g]), mode_real.cell_params(g, e))
            fp = _explained_fraction(exp_p.values[g], exp_p.times, theta_p,
                                     float(mode_permuted.phi[g]), mode_permuted.cell_params(g, e))
            if fr is None or fp is None:
                continue
            rows.append(VarianceReductionRow(
                matrix.genes[g], exp_r.name,
                real=max(fr, 0.0), permuted=max(fp, 0.0),
                real_raw=fr, permuted_raw=fp,
            ))
    return rows
