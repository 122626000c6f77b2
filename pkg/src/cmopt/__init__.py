"""Coupled low-rank factorization of PSD matrix cohorts with kernel regression.

A cohort of symmetric positive-semidefinite correlation matrices is jointly
decomposed over a shared sparse basis while the per-patient loadings feed a
nonlinear kernel ridge regression onto scalar severity scores.  Training
alternates proximal basis steps, a closed-form regression dual, per-patient
trust-region loading updates, and augmented-Lagrangian constraint handling;
unseen patients are scored through a small nonnegative quadratic program.
"""

from .core import (
    CmoError,
    CohortDataset,
    ConfigError,
    DataFormatError,
    Hyperparams,
    KERNEL_PRESETS,
    KernelSpec,
    ModelState,
    SolverError,
    TrustRegionConfig,
    ValidationError,
    residualize_first_eigenvector,
    select_rank,
    validate_cohort,
)
from .evaluation import (
    EvalReport,
    cross_validate,
    decoupled_baseline,
    fold_assignments,
    grid_sweep,
    mae,
    mutual_information,
)
from .factorization import (
    ObjectiveBreakdown,
    grad_x,
    objective,
    soft_threshold,
    update_duals,
    update_v,
    update_x,
)
from .kernel import gram, kernel_eval, kernel_grad, kernel_hess
from .prediction import UnseenQP, solve_unseen_loading
from .regression import RegressionDual, predict, regression_residual, solve_dual
from .solver import FitTrace, FittedModel, build_qp, fit, initialize, predict_unseen
from .storage import load_cohort, load_model, save_cohort, save_model
from .synth import (
    GroundTruth,
    SynthConfig,
    generate,
    generate_weak_signal_cohort,
    kernel_recovery_experiment,
    standard_variants,
)
from .trustregion import (
    LoadingSubproblem,
    grad_c,
    hess_c,
    solve_subproblem,
    update_loading,
)

__version__ = "0.1.0"

__all__ = [
    "CmoError", "CohortDataset", "ConfigError", "DataFormatError", "Hyperparams",
    "KERNEL_PRESETS", "KernelSpec", "ModelState", "SolverError", "TrustRegionConfig",
    "ValidationError", "residualize_first_eigenvector", "select_rank", "validate_cohort",
    "EvalReport", "cross_validate", "decoupled_baseline", "fold_assignments", "grid_sweep",
    "mae", "mutual_information",
    "ObjectiveBreakdown", "grad_x", "objective", "soft_threshold", "update_duals",
    "update_v", "update_x",
    "gram", "kernel_eval", "kernel_grad", "kernel_hess",
    "UnseenQP", "solve_unseen_loading",
    "RegressionDual", "predict", "regression_residual", "solve_dual",
    "FitTrace", "FittedModel", "build_qp", "fit", "initialize", "predict_unseen",
    "load_cohort", "load_model", "save_cohort", "save_model",
    "GroundTruth", "SynthConfig", "generate", "generate_weak_signal_cohort",
    "kernel_recovery_experiment", "standard_variants",
    "LoadingSubproblem", "grad_c", "hess_c", "solve_subproblem", "update_loading",
]
