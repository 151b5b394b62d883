"""Calibration of computer models from massive physical datasets by Poisson subsampling."""

from .calibrate import (
    Estimate,
    FitOptions,
    WeightedSample,
    fit_ipwls,
    fit_ols,
    loss_curvature,
    minimize_loss,
    wls_grad,
    wls_hess,
    wls_loss,
)
from .emulator import Design, GpEmulator, GpOptions, PassThrough, fit_gp, maximin_lhd, model_design
from .errors import (
    DegenerateScoresError,
    DomainError,
    EstimationError,
    FitError,
    InferenceError,
    IngestionError,
    NonConvergenceError,
    PilotError,
    ProbabilityError,
    SubcalError,
)
from .harness import ExperimentConfig, MetricsReport, default_r_grid, emit_report, run_experiment
from .inference import (
    CovarianceReport,
    amse_of_probs,
    amse_single,
    amse_two_step,
    confidence_intervals,
    estimate_variance,
)
from .io import load_csv, write_csv
from .models import (
    ComputerModel,
    GenConfig,
    PhysicalData,
    generate_physical_data,
    get_model,
    list_models,
    register_model,
)
from .sampling import (
    FixedProbs,
    Pilot,
    SamplingConfig,
    SubsampleSet,
    TwoStepResult,
    mv_score,
    mvc_score,
    optimal_probs,
    pilot_stage,
    poisson_sample,
    threshold,
    two_step,
    uniform_fit,
    uniform_probs,
    weighted_prob,
)

__version__ = "0.1.0"

__all__ = [
    "ComputerModel",
    "CovarianceReport",
    "DegenerateScoresError",
    "Design",
    "DomainError",
    "Estimate",
    "EstimationError",
    "ExperimentConfig",
    "FitError",
    "FitOptions",
    "FixedProbs",
    "GenConfig",
    "GpEmulator",
    "GpOptions",
    "InferenceError",
    "IngestionError",
    "MetricsReport",
    "NonConvergenceError",
    "PassThrough",
    "PhysicalData",
    "Pilot",
    "PilotError",
    "ProbabilityError",
    "SamplingConfig",
    "SubcalError",
    "SubsampleSet",
    "TwoStepResult",
    "WeightedSample",
    "amse_of_probs",
    "amse_single",
    "amse_two_step",
    "confidence_intervals",
    "default_r_grid",
    "emit_report",
    "estimate_variance",
    "fit_gp",
    "fit_ipwls",
    "fit_ols",
    "generate_physical_data",
    "get_model",
    "list_models",
    "load_csv",
    "loss_curvature",
    "maximin_lhd",
    "minimize_loss",
    "model_design",
    "mv_score",
    "mvc_score",
    "optimal_probs",
    "pilot_stage",
    "poisson_sample",
    "register_model",
    "run_experiment",
    "threshold",
    "two_step",
    "uniform_fit",
    "uniform_probs",
    "weighted_prob",
    "wls_grad",
    "wls_hess",
    "wls_loss",
    "write_csv",
]
