"""Ingestion and preprocessing of the gene-by-experiment time-series matrix.

The canonical interchange format is long-form TSV with header
``gene<TAB>experiment<TAB>time<TAB>value`` and ``NA`` for missing values.
A wide reader (one table per experiment, first column ``gene``, remaining
column headers the measurement times in minutes) is provided as a
convenience.  Internally a series set stores one float array per experiment
with NaN marking absent observations, so all downstream numerics can rely on
plain masking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class MatrixFormatError(ValueError):
    """Raised when an input file or matrix violates the format contract."""


class Observation(NamedTuple):
    value: float
    present: bool

ABSENT = Observation(float("nan"), False)


@dataclass
class ExperimentSeriesSet:
    """All series of one experiment on a shared, strictly increasing time grid.

    ``values`` has shape (G, S); absent observations are NaN.
    """

    name: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.ndim != 1:
            raise MatrixFormatError(f"experiment {self.name}: times must be 1-D")
        if np.any(np.diff(self.times) <= 0):
            raise MatrixFormatError(
                f"experiment {self.name}: times must be strictly increasing"
            )
        if self.values.ndim != 2 or self.values.shape[1] != self.times.size:
            raise MatrixFormatError(
                f"experiment {self.name}: values shape {self.values.shape} does not"
                f" match {self.times.size} time points"
            )

    @property
    def n_times(self) -> int:
        return self.times.size

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def copy(self) -> "ExperimentSeriesSet":
        return ExperimentSeriesSet(self.name, self.times.copy(), self.values.copy())


@dataclass
class TimeSeriesMatrix:
    """Gene-by-experiment grid of irregularly sampled series."""

    genes: list[str]
    experiments: list[ExperimentSeriesSet]

    def __post_init__(self):
        if len(self.genes) < 1 or len(self.experiments) < 1:
            raise MatrixFormatError("matrix needs at least one gene and one experiment")
        if len(set(self.genes)) != len(self.genes):
            dupes = sorted({g for g in self.genes if self.genes.count(g) > 1})
            raise MatrixFormatError(f"duplicate gene identifiers: {dupes[:5]}")
        for exp in self.experiments:
            if exp.values.shape[0] != len(self.genes):
                raise MatrixFormatError(
                    f"experiment {exp.name}: {exp.values.shape[0]} rows for"
                    f" {len(self.genes)} genes"
                )

    @property
    def n_genes(self) -> int:
        return len(self.genes)

    @property
    def n_experiments(self) -> int:
        return len(self.experiments)

    def observation(self, gene: int, experiment: int, t_index: int) -> Observation:
        v = self.experiments[experiment].values[gene, t_index]
        return ABSENT if np.isnan(v) else Observation(float(v), True)

    def n_present(self) -> int:
        return int(sum(exp.present.sum() for exp in self.experiments))

    def copy(self) -> "TimeSeriesMatrix":
        return TimeSeriesMatrix(list(self.genes), [e.copy() for e in self.experiments])


@dataclass
class RemovalEntry:
    """One action taken by filter_sparse."""

    action: str  # "blanked_series" or "dropped_gene"
    gene: str
    experiment: str | None = None
    missing_fraction: float | None = None


# ---------------------------------------------------------------------------
# loading / writing
# ---------------------------------------------------------------------------

def _parse_value(cell: str) -> float:
    cell = cell.strip()
    if cell == "" or cell.upper() == "NA":
        return float("nan")
    try:
        return float(cell)
    except ValueError:
        return float("nan")


def _load_long(path: Path) -> TimeSeriesMatrix:
    genes: list[str] = []
    gene_index: dict[str, int] = {}
    exp_order: list[str] = []
    # per experiment: {(gene, time): (value, line_no)}
    records: dict[str, dict[tuple[str, float], float]] = {}
    seen: dict[tuple[str, str, float], int] = {}

    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if [h.strip().lower() for h in header] != ["gene", "experiment", "time", "value"]:
            raise MatrixFormatError(
                f"{path}: expected header 'gene\\texperiment\\ttime\\tvalue',"
                f" got {header!r}"
            )
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise MatrixFormatError(f"{path}:{line_no}: expected 4 columns, got {len(parts)}")
            gene, exp, time_s, value_s = parts
            try:
                t = float(time_s)
            except ValueError:
                raise MatrixFormatError(f"{path}:{line_no}: unparseable time {time_s!r}") from None
            key = (gene, exp, t)
            if key in seen:
                raise MatrixFormatError(
                    f"{path}:{line_no}: duplicate (gene, experiment, time) triple"
                    f" ({gene}, {exp}, {time_s}); first at line {seen[key]}"
                )
            seen[key] = line_no
            if gene not in gene_index:
                gene_index[gene] = len(genes)
                genes.append(gene)
            if exp not in records:
                records[exp] = {}
                exp_order.append(exp)
            records[exp][(gene, t)] = _parse_value(value_s)

    if not genes or not exp_order:
        raise MatrixFormatError(f"{path}: no data rows")

    experiments = []
    for exp in exp_order:
        times = np.array(sorted({t for (_, t) in records[exp]}), dtype=float)
        t_index = {t: i for i, t in enumerate(times)}
        values = np.full((len(genes), times.size), np.nan)
        for (gene, t), v in records[exp].items():
            values[gene_index[gene], t_index[t]] = v
        experiments.append(ExperimentSeriesSet(exp, times, values))
    return TimeSeriesMatrix(genes, experiments)


def _load_wide_one(path: Path) -> tuple[str, np.ndarray, list[str], np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if not header or header[0].strip().lower() != "gene":
            raise MatrixFormatError(f"{path}: first column of a wide table must be 'gene'")
        try:
            times = np.array([float(h) for h in header[1:]], dtype=float)
        except ValueError:
            raise MatrixFormatError(f"{path}: wide column headers must be times in minutes") from None
        if times.size == 0:
            raise MatrixFormatError(f"{path}: wide table has no time columns")
        if np.any(np.diff(times) <= 0):
            raise MatrixFormatError(f"{path}: wide table times must be strictly increasing")
        genes: list[str] = []
        rows: list[list[float]] = []
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 1 + times.size:
                raise MatrixFormatError(
                    f"{path}:{line_no}: expected {1 + times.size} columns, got {len(parts)}"
                )
            if parts[0] in genes:
                raise MatrixFormatError(f"{path}:{line_no}: duplicate gene {parts[0]!r}")
            genes.append(parts[0])
            rows.append([_parse_value(c) for c in parts[1:]])
    return path.stem, times, genes, np.array(rows, dtype=float)


def load_matrix(path, fmt: str = "long") -> TimeSeriesMatrix:
    """Read a matrix from disk.

    ``fmt="long"`` takes a single TSV path.  ``fmt="wide"`` takes one path or
    a sequence of paths, one table per experiment; the experiment name is the
    file stem.
    """
    if fmt == "long":
        return _load_long(Path(path))
    if fmt != "wide":
        raise ValueError(f"unknown format {fmt!r}")

    paths = [Path(p) for p in (path if isinstance(path, (list, tuple)) else [path])]
    loaded = [_load_wide_one(p) for p in paths]
    genes = loaded[0][2]
    for name, _, g, _ in loaded[1:]:
        if g != genes:
            raise MatrixFormatError(
                f"wide table {name} lists different genes than {loaded[0][0]};"
                " wide experiments must share one gene column"
            )
    experiments = [ExperimentSeriesSet(name, times, values) for name, times, _, values in loaded]
    return TimeSeriesMatrix(list(genes), experiments)


def write_matrix(matrix: TimeSeriesMatrix, path) -> None:
    """Write the canonical long format; present values round-trip bit-exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gene\texperiment\ttime\tvalue\n")
        for exp in matrix.experiments:
            for g, gene in enumerate(matrix.genes):
                row = exp.values[g]
                for t, v in zip(exp.times, row):
                    cell = "NA" if np.isnan(v) else repr(float(v))
                    fh.write(f"{gene}\t{exp.name}\t{repr(float(t))}\t{cell}\n")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def median_center(matrix: TimeSeriesMatrix) -> TimeSeriesMatrix:
    """Shift every array (one experiment, one time point) to median zero.

    Arrays without any present value are left unchanged with a warning.
    """
    out = matrix.copy()
    for exp in out.experiments:
        for j in range(exp.n_times):
            col = exp.values[:, j]
            present = ~np.isnan(col)
            if not present.any():
                logger.warning(
                    "experiment %s, time %g: no present values, array left unchanged",
                    exp.name, exp.times[j],
                )
                continue
            col[present] -= np.median(col[present])
    return out


def average_replicates(replicates: Sequence[TimeSeriesMatrix]) -> TimeSeriesMatrix:
    """Cell-wise mean over technical replicates of identical shape.

    A cell is absent in the result only when it is absent in every replicate.
    """
    if not replicates:
        raise MatrixFormatError("no replicates given")
    first = replicates[0]
    for other in replicates[1:]:
        if other.genes != first.genes:
            raise MatrixFormatError("replicate gene lists differ")
        if len(other.experiments) != len(first.experiments):
            raise MatrixFormatError("replicate experiment counts differ")
        for ea, eb in zip(first.experiments, other.experiments):
            if ea.name != eb.name or not np.array_equal(ea.times, eb.times):
                raise MatrixFormatError(f"replicate time grids differ in experiment {ea.name}")
    out = first.copy()
    for e, exp in enumerate(out.experiments):
        stack = np.stack([r.experiments[e].values for r in replicates])
        with np.errstate(invalid="ignore"):
            exp.values = np.where(
                np.all(np.isnan(stack), axis=0), np.nan, np.nanmean(stack, axis=0)
            )
    return out


def filter_sparse(
    matrix: TimeSeriesMatrix, max_missing_fraction: float
) -> tuple[TimeSeriesMatrix, list[RemovalEntry]]:
    """Blank series whose missing fraction exceeds the threshold; drop genes
    left absent in every experiment.  Returns the filtered matrix and a log
    of every action taken."""
    if not 0.0 <= max_missing_fraction <= 1.0:
        raise ValueError("max_missing_fraction must be in [0, 1]")
    out = matrix.copy()
    log: list[RemovalEntry] = []
    for exp in out.experiments:
        missing_frac = np.isnan(exp.values).mean(axis=1)
        for g in np.nonzero(missing_frac > max_missing_fraction)[0]:
            exp.values[g, :] = np.nan
            log.append(
                RemovalEntry("blanked_series", out.genes[g], exp.name, float(missing_frac[g]))
            )
    alive = np.zeros(out.n_genes, dtype=bool)
    for exp in out.experiments:
        alive |= exp.present.any(axis=1)
    if not alive.all():
        for g in np.nonzero(~alive)[0]:
            log.append(RemovalEntry("dropped_gene", out.genes[g]))
        genes = [g for g, keep in zip(out.genes, alive) if keep]
        if not genes:
            raise MatrixFormatError("filter removed every gene")
        experiments = [
            ExperimentSeriesSet(e.name, e.times, e.values[alive]) for e in out.experiments
        ]
        out = TimeSeriesMatrix(genes, experiments)
    return out, log
