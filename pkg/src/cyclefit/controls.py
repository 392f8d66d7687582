"""Background data for calibration: within-series permutation and simulation
from the trend-only null, plus the control-fit protocol that pins the
experiment-level parameters at the real-data posterior mode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import ExperimentSeriesSet, TimeSeriesMatrix
from .distributions import cell_rng, experiment_rng, scaled_inv_chi2_rvs
from .model import ChainState, Model, PriorConstants
from .sampler import ChainTrace, SamplerConfig, posterior_mode, run_chain


@dataclass
class ControlSpec:
    """Declares a background dataset: its kind, seed and source."""

    kind: str  # "permutation" or "m0_simulation"
    seed: int
    source: TimeSeriesMatrix

    def __post_init__(self):
        if self.kind not in ("permutation", "m0_simulation"):
            raise ValueError(f"unknown control kind {self.kind!r}")


def permute_matrix(matrix: TimeSeriesMatrix, seed: int) -> TimeSeriesMatrix:
    """Shuffle each series' present values among its own present slots.

    Times and the missing mask are untouched, so every per-series value
    multiset is preserved exactly while any temporal structure is destroyed.
    Each series uses its own seed-derived substream.
    """
    out = matrix.copy()
    for e, exp in enumerate(out.experiments):
        for g in range(out.n_genes):
            idx = np.nonzero(exp.present[g])[0]
            if idx.size < 2:
                continue
            rng = cell_rng(seed, g, e)
            exp.values[g, idx] = exp.values[g, idx[rng.permutation(idx.size)]]
    return out


def simulate_m0(
    template: TimeSeriesMatrix, consts: PriorConstants, seed: int
) -> tuple[TimeSeriesMatrix, ChainState]:
    """Draw a dataset from the trend-only model with every parameter sampled
    from its prior.

    The template supplies the shape: gene list, time grids and missing mask
    are cloned, so the simulated data matches the source's size and
    structure.  Returns the data and the generating parameters (periodic
    entries at neutral values) for oracle checks.
    """
    k = consts
    out = template.copy()
    truth = ChainState.zeros(out.n_genes, out.n_experiments, consts)
    for e, exp in enumerate(out.experiments):
        mask = exp.present.copy()
        truth.zeta[e] = experiment_rng(seed, e).exponential(1.0 / k.c13)
        for g in range(out.n_genes):
            rng = cell_rng(seed, g, e)
            a = rng.normal(0.0, np.sqrt(k.c1))
            b = rng.normal(0.0, np.sqrt(k.c2))
            c = rng.normal(0.0, np.sqrt(k.c3))
            d = rng.uniform(0.0, k.c4)
            sigma2 = scaled_inv_chi2_rvs(rng, k.c12, truth.zeta[e])
            truth.a[g, e], truth.b[g, e], truth.c[g, e] = a, b, c
            truth.d[g, e] = d
            truth.sigma2[g, e] = sigma2
            mean = a + b * exp.times + c * np.minimum(exp.times - d, 0.0) ** 2
            noise = np.sqrt(sigma2) * rng.standard_normal(exp.n_times)
            exp.values[g] = np.where(mask[g], mean + noise, np.nan)
    return out, truth


def fit_control(
    control: TimeSeriesMatrix,
    consts: PriorConstants,
    config: SamplerConfig,
    real_trace: ChainTrace,
) -> ChainTrace:
    """Fit the periodic model to a background dataset with the experiment
    -level parameters held at the real-data posterior mode."""
    mode = posterior_mode(real_trace)
    return run_chain(control, consts, config, Model.M1, fixed_theta=mode)
