"""Hierarchical Bayesian periodicity detection for gene-by-experiment
time-series matrices: custom MCMC fitting of a damped-cosine model, control
generation, and posterior statistics for classifying periodic expression."""

from .dataset import (
    ExperimentSeriesSet,
    MatrixFormatError,
    Observation,
    RemovalEntry,
    TimeSeriesMatrix,
    average_replicates,
    filter_sparse,
    load_matrix,
    median_center,
    write_matrix,
)
from .model import (
    CellParams,
    ChainState,
    ExperimentParams,
    Model,
    PriorConstants,
    apply_phase_gauge,
    log_likelihood,
    log_likelihood_cell,
    log_posterior,
    log_prior,
    mean_m0,
    mean_m1,
)
from .sampler import (
    ChainInitError,
    ChainTrace,
    SamplerConfig,
    posterior_mode,
    run_chain,
)

__version__ = "0.1.0"
