"""Per-gene periodicity statistics, threshold calibration against controls,
ranking/ordering for display, and the reproducibility subset scan.

Three statistics classify genes: the signal-to-noise ratio of the fitted
periodic component (high = periodic), the length of the 95% central
posterior interval of the relative phase (low = periodic, the peaking time is
well determined), and the information-criterion difference between the
periodic and trend-only fits at their posterior modes (positive = periodic).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .dataset import TimeSeriesMatrix
from .distributions import circular_mean, wrap_angle
from .model import ChainState, Model, log_likelihood_cell
from .sampler import ChainTrace, posterior_mode

TWO_PI = 2.0 * math.pi


@dataclass
class GeneSnrSummary:
    mean: float
    q025: float
    q975: float


@dataclass
class PeriodicityReport:
    """Posterior summaries and classification flags for every gene."""

    genes: list[str]
    snr: list[GeneSnrSummary]
    lpi: np.ndarray
    bic01: np.ndarray
    relative_phase: np.ndarray
    rank: np.ndarray  # 1-based, by decreasing mean SNR
    claimed: dict[str, np.ndarray] = field(default_factory=dict)
    thresholds: dict[str, float] = field(default_factory=dict)

    @property
    def snr_mean(self) -> np.ndarray:
        return np.array([s.mean for s in self.snr])


# ---------------------------------------------------------------------------
# SNR
# ---------------------------------------------------------------------------

def snr_per_state(state: ChainState, matrix: TimeSeriesMatrix) -> np.ndarray:
    """Per-gene ratio of the squared fitted periodic signal to the noise
    variance, summed over present points of all experiments."""
    out = np.zeros(matrix.n_genes)
    for e, exp in enumerate(matrix.experiments):
        t = exp.times[None, :]
        signal = (state.amp[:, e, None]
                  * np.cos(state.mu[e] * t + state.psi[e] + state.phi[:, None])
                  * np.exp(-state.lam[e] * t))
        sq = np.where(exp.present, signal * signal, 0.0)
        out += sq.sum(axis=1) / state.sigma2[:, e]
    return out


def snr_samples(trace: ChainTrace, matrix: TimeSeriesMatrix) -> np.ndarray:
    """SNR of every retained state; shape (n_states, G)."""
    if not trace.states:
        raise ValueError("empty trace")
    return np.array([snr_per_state(s, matrix) for s in trace.states])


def snr_summary(trace: ChainTrace, matrix: TimeSeriesMatrix) -> list[GeneSnrSummary]:
    """Posterior mean and central 95% bounds of each gene's SNR.

    Percentiles interpolate linearly between order statistics.
    """
    samples = snr_samples(trace, matrix)
    mean = samples.mean(axis=0)
    q025, q975 = np.percentile(samples, [2.5, 97.5], axis=0)
    return [GeneSnrSummary(float(m), float(lo), float(hi))
            for m, lo, hi in zip(mean, q025, q975)]


# ---------------------------------------------------------------------------
# relative phase and LPI
# ---------------------------------------------------------------------------

def relative_phase_samples(trace: ChainTrace) -> np.ndarray:
    """Wrapped phi_g + psi_1 per retained state; shape (n_states, G)."""
    if not trace.states:
        raise ValueError("empty trace")
    return np.array([wrap_angle(s.phi + s.psi[0]) for s in trace.states])


def lpi_from_samples(phases: np.ndarray) -> float:
    """Length of the central 95% interval of circular phase samples.

    Samples are recentered about their mean direction before taking the
    2.5-97.5 percentile span, and the result is capped at the full circle.
    """
    center = circular_mean(phases)
    recentered = wrap_angle(np.asarray(phases) - center)
    lo, hi = np.percentile(recentered, [2.5, 97.5])
    return float(min(hi - lo, TWO_PI))


def lpi(trace: ChainTrace, gene: int) -> float:
    return lpi_from_samples(relative_phase_samples(trace)[:, gene])


def lpi_all(trace: ChainTrace) -> np.ndarray:
    phases = relative_phase_samples(trace)
    return np.array([lpi_from_samples(phases[:, g]) for g in range(phases.shape[1])])


def relative_phase_all(trace: ChainTrace) -> np.ndarray:
    phases = relative_phase_samples(trace)
    return np.array([circular_mean(phases[:, g]) for g in range(phases.shape[1])])


# ---------------------------------------------------------------------------
# model-comparison statistic
# ---------------------------------------------------------------------------

def _gene_loglik(state: ChainState, matrix: TimeSeriesMatrix, gene: int,
                 model: Model) -> float:
    total = 0.0
    for e, exp in enumerate(matrix.experiments):
        total += log_likelihood_cell(
            exp.values[gene], exp.times, state.experiment_params(e),
            float(state.phi[gene]), state.cell_params(gene, e), model,
        )
    return total


def bic01(mode_m1: ChainState, mode_m0: ChainState, matrix: TimeSeriesMatrix,
          gene: int) -> float:
    """Information-criterion difference favoring the periodic model.

    Twice the log-likelihood gap at the two posterior modes minus the
    parameter penalty: the periodic model spends one extra parameter per
    experiment with data (the amplitude) plus the gene phase.  N counts the
    gene's present observations; genes with none are unclassifiable (NaN).
    """
    n_obs = 0
    active = 0
    for exp in matrix.experiments:
        m = int(exp.present[gene].sum())
        n_obs += m
        active += m > 0
    if n_obs == 0:
        return float("nan")
    ll1 = _gene_loglik(mode_m1, matrix, gene, Model.M1)
    ll0 = _gene_loglik(mode_m0, matrix, gene, Model.M0)
    return 2.0 * ll1 - 2.0 * ll0 - (active + 1) * math.log(n_obs)


def bic01_all(mode_m1: ChainState, mode_m0: ChainState,
              matrix: TimeSeriesMatrix) -> np.ndarray:
    return np.array([bic01(mode_m1, mode_m0, matrix, g) for g in range(matrix.n_genes)])


# ---------------------------------------------------------------------------
# calibration and claims
# ---------------------------------------------------------------------------

def calibrate_threshold(
    real_values: np.ndarray, control_values: np.ndarray, fpr: float,
    direction: str = "greater",
) -> tuple[float, np.ndarray]:
    """Threshold a statistic at a target false positive rate estimated from
    its distribution on background data.

    ``direction="greater"`` claims real values above the control's (1-fpr)
    quantile; ``"less"`` claims below the fpr quantile.
    """
    if not 0.0 < fpr < 1.0:
        raise ValueError("fpr must be in (0, 1)")
    real_values = np.asarray(real_values, dtype=float)
    control_values = np.asarray(control_values, dtype=float)
    if direction == "greater":
        threshold = float(np.quantile(control_values, 1.0 - fpr))
        claimed = real_values > threshold
    elif direction == "less":
        threshold = float(np.quantile(control_values, fpr))
        claimed = real_values < threshold
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return threshold, claimed


def claim_by_control_limit(
    real_mean: np.ndarray, control_q975: np.ndarray, min_count: int
) -> np.ndarray:
    """Alternative claim rule for subset comparisons: a gene is claimed when
    its mean SNR exceeds the upper posterior limit of at least ``min_count``
    control genes."""
    real_mean = np.asarray(real_mean, dtype=float)
    control_q975 = np.sort(np.asarray(control_q975, dtype=float))
    beaten = np.searchsorted(control_q975, real_mean, side="left")
    return beaten >= min_count


# ---------------------------------------------------------------------------
# ranking, ordering, intersection
# ---------------------------------------------------------------------------

@dataclass
class HeatmapRow:
    position: int
    gene: str
    group: int
    experiment: str
    time: float
    value: float  # NaN for absent


def default_group_sizes(n_genes: int, n_groups: int = 6, top: int = 300) -> list[int]:
    """First group holds the top genes; the rest split near-equally."""
    top = min(top, n_genes)
    rest = n_genes - top
    k = max(n_groups - 1, 1)
    sizes = [top] + [rest // k + (1 if i < rest % k else 0) for i in range(k)]
    return [s for s in sizes if s > 0] or [n_genes]


def rank_genes(snr_mean: np.ndarray) -> np.ndarray:
    """1-based rank by decreasing mean SNR (stable for ties)."""
    order = np.argsort(-np.asarray(snr_mean), kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(1, order.size + 1)
    return rank


def rank_and_order(
    report: PeriodicityReport, matrix: TimeSeriesMatrix,
    group_sizes: list[int] | None = None,
) -> tuple[list[int], list[HeatmapRow]]:
    """Display layout: genes sorted by decreasing mean SNR, stratified into
    groups, each group re-sorted by relative phase ascending from -pi.

    Returns the gene display order (matrix indices) and plot-ready rows with
    each series normalized to zero mean and unit variance over its present
    values (zero-variance series export as zeros).
    """
    snr_mean = report.snr_mean
    sizes = group_sizes or default_group_sizes(len(report.genes))
    if sum(sizes) != len(report.genes):
        raise ValueError("group sizes must sum to the number of genes")
    by_snr = list(np.argsort(-snr_mean, kind="stable"))
    order: list[int] = []
    groups: list[int] = []
    start = 0
    for group_id, size in enumerate(sizes):
        block = by_snr[start:start + size]
        block.sort(key=lambda g: report.relative_phase[g])
        order.extend(block)
        groups.extend([group_id] * size)
        start += size

    rows: list[HeatmapRow] = []
    for position, g in enumerate(order):
        for exp in matrix.experiments:
            values = exp.values[g]
            present = ~np.isnan(values)
            norm = np.full_like(values, np.nan)
            if present.any():
                sub = values[present]
                sd = float(sub.std())
                norm[present] = (sub - sub.mean()) / sd if sd > 0 else 0.0
            for t, v in zip(exp.times, norm):
                rows.append(HeatmapRow(position, matrix.genes[g], groups[position],
                                       exp.name, float(t), float(v)))
    return order, rows


@dataclass
class IntersectionResult:
    intersection: np.ndarray  # bool mask over genes
    pairwise_counts: dict[tuple[str, str], int]
    correlations: dict[tuple[str, str], float]


def intersect_claims(
    claims: dict[str, np.ndarray], scores: dict[str, np.ndarray] | None = None
) -> IntersectionResult:
    """Combine per-statistic claimed sets: the all-statistic intersection,
    pairwise overlap counts, and Spearman correlations between the statistic
    vectors (LPI negated so that larger always means more periodic)."""
    names = list(claims)
    sizes = {np.asarray(v).size for v in claims.values()}
    if len(sizes) != 1:
        raise ValueError("claimed sets cover different gene universes")
    inter = np.ones(sizes.pop(), dtype=bool)
    for v in claims.values():
        inter &= np.asarray(v, dtype=bool)
    pairwise = {}
    for i, x in enumerate(names):
        for y in names[i + 1:]:
            pairwise[(x, y)] = int((np.asarray(claims[x]) & np.asarray(claims[y])).sum())
    correlations = {}
    if scores:
        oriented = {
            name: (-np.asarray(v) if name.lower() == "lpi" else np.asarray(v))
            for name, v in scores.items()
        }
        keys = list(oriented)
        for i, x in enumerate(keys):
            for y in keys[i:]:
                rho = spearmanr(oriented[x], oriented[y]).statistic
                correlations[(x, y)] = float(rho)
    return IntersectionResult(inter, pairwise, correlations)


# ---------------------------------------------------------------------------
# reproducibility scan
# ---------------------------------------------------------------------------

@dataclass
class ReproducibilityResult:
    removed: int
    final_correlation: float
    final_pvalue: float
    exhausted: bool  # stopped because too few genes remained


def _spearman_pvalue_onesided(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """One-sided (positive) p-value via the Fisher-transform normal
    approximation."""
    rho = float(spearmanr(x, y).statistic)
    n = x.size
    if not np.isfinite(rho):
        return 0.0, 1.0
    rho_c = min(max(rho, -0.999999), 0.999999)
    z = math.atanh(rho_c) * math.sqrt(max(n - 3, 1))
    p = 0.5 * math.erfc(z / math.sqrt(2.0))
    return rho, p


def reproducibility_scan(
    snr_a: np.ndarray, snr_b: np.ndarray, alpha: float = 0.05,
    min_remaining: int = 10,
) -> ReproducibilityResult:
    """Count genes supported by two analyses: remove, one at a time, the gene
    ranked highest in both SNR vectors (smallest worse-rank) until the
    remaining vectors' Spearman correlation stops being significantly
    positive.  The number removed at stopping is the reproducible count."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    a = np.asarray(snr_a, dtype=float)
    b = np.asarray(snr_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("SNR vectors cover different gene universes")
    keep = np.ones(a.size, dtype=bool)
    removed = 0
    while True:
        idx = np.nonzero(keep)[0]
        if idx.size < min_remaining:
            rho, p = _spearman_pvalue_onesided(a[idx], b[idx]) if idx.size > 2 else (float("nan"), 1.0)
            return ReproducibilityResult(removed, rho, p, True)
        rho, p = _spearman_pvalue_onesided(a[idx], b[idx])
        if p >= alpha:
            return ReproducibilityResult(removed, rho, p, False)
        # rank 1 = largest SNR; drop the gene with the best worse-rank
        rank_a = np.argsort(np.argsort(-a[idx]))
        rank_b = np.argsort(np.argsort(-b[idx]))
        worst = np.maximum(rank_a, rank_b)
        keep[idx[int(np.argmin(worst))]] = False
        removed += 1


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

def build_report(
    trace_m1: ChainTrace,
    matrix: TimeSeriesMatrix,
    control_trace: ChainTrace | None = None,
    control_matrix: TimeSeriesMatrix | None = None,
    mode_m0: ChainState | None = None,
    mode_m1: ChainState | None = None,
    fpr: float = 0.002,
    bic_threshold: float = 0.0,
) -> PeriodicityReport:
    """Assemble the full per-gene report, with classification flags for every
    statistic whose inputs are available."""
    snr = snr_summary(trace_m1, matrix)
    lpi_values = lpi_all(trace_m1)
    phase = relative_phase_all(trace_m1)
    if mode_m0 is not None:
        m1_state = mode_m1 if mode_m1 is not None else posterior_mode(trace_m1)
        bic = bic01_all(m1_state, mode_m0, matrix)
    else:
        bic = np.full(matrix.n_genes, np.nan)
    report = PeriodicityReport(
        genes=list(matrix.genes), snr=snr, lpi=lpi_values, bic01=bic,
        relative_phase=phase, rank=rank_genes([s.mean for s in snr]),
    )
    if control_trace is not None:
        cmatrix = control_matrix if control_matrix is not None else matrix
        if cmatrix.n_genes != matrix.n_genes:
            raise ValueError("control and real traces cover different gene universes")
        control_snr = snr_summary(control_trace, cmatrix)
        thr, claimed = calibrate_threshold(
            report.snr_mean, np.array([s.mean for s in control_snr]), fpr, "greater")
        report.thresholds["snr"] = thr
        report.claimed["snr"] = claimed
        control_lpi = lpi_all(control_trace)
        thr, claimed = calibrate_threshold(lpi_values, control_lpi, fpr, "less")
        report.thresholds["lpi"] = thr
        report.claimed["lpi"] = claimed
    if mode_m0 is not None:
        report.thresholds["bic"] = bic_threshold
        with np.errstate(invalid="ignore"):
            report.claimed["bic"] = np.where(np.isnan(bic), False, bic > bic_threshold)
    return report
