"""Inference of a latent equipment-deterioration process hidden under yearly
maintenance, from annual failure-count panels: GP imputation, three-state
classification, Bayesian/MLE rate estimation, prediction, MSE evaluation and
simulation-based calibration."""

__version__ = "0.1.0"

from .ctmc import (
    RateParams,
    build_rate_matrix,
    deterioration_matrix,
    expm,
    maintenance_matrix,
    rates_for_age,
)
from .fleet import (
    FleetPanel,
    ShipRecord,
    StatePanel,
    StateRecord,
    StateThresholds,
    classify,
    fit_thresholds,
    load_panel,
    load_state_panel,
    simulate_panel,
    standardize,
)
from .gp import (
    GPHyperParams,
    GPPrior,
    ImputationResult,
    StructuredKernel,
    assemble_kernel,
    eq_kernel,
    fit_hyperparams,
    impute,
    log_marginal,
)
from .hmm import evolve, log_likelihood, predict_states
from .inference import (
    PosteriorDraws,
    PriorSpec,
    derived_matrices,
    mle,
    sample_posterior,
    summarize,
)
from .evaluation import FitConfig, MSEReport, SplitSpec, mse, run_splits, state_occupancy
from .sbc import SBCRankTable, rank_histogram, run_sbc, uniformity_pvalues

__all__ = [
    "__version__",
    "RateParams", "build_rate_matrix", "deterioration_matrix", "expm",
    "maintenance_matrix", "rates_for_age",
    "FleetPanel", "ShipRecord", "StatePanel", "StateRecord", "StateThresholds",
    "classify", "fit_thresholds", "load_panel", "load_state_panel",
    "simulate_panel", "standardize",
    "GPHyperParams", "GPPrior", "ImputationResult", "StructuredKernel",
    "assemble_kernel", "eq_kernel", "fit_hyperparams", "impute", "log_marginal",
    "evolve", "log_likelihood", "predict_states",
    "PosteriorDraws", "PriorSpec", "derived_matrices", "mle",
    "sample_posterior", "summarize",
    "FitConfig", "MSEReport", "SplitSpec", "mse", "run_splits",
    "state_occupancy",
    "SBCRankTable", "rank_histogram", "run_sbc", "uniformity_pvalues",
]
