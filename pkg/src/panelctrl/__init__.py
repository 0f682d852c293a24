"""Synthetic control and ridge-augmented synthetic control for panel data.

The package covers the full workflow: panel ingestion and validation,
simplex-constrained weight solving, ridge augmentation with verifiable
closed forms, auxiliary-covariate handling, penalty selection by
cross-validation, conformal prediction intervals, and a seeded Monte
Carlo harness for calibrated evaluation.
"""

from .covariates import (
    CovariatePanel,
    ResidualizedPanel,
    balance_table,
    covariates_from_long,
    joint_augment,
    joint_solve,
    residualize,
    standardize_to_outcomes,
    two_step_weights,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DuplicateCellError,
    GridError,
    MissingCellError,
    PanelCtrlError,
    PanelFormatError,
    SingularityError,
    TreatmentTimeError,
    UnknownUnitError,
)
from .estimators import EstimatorSpec, estimate
from .inference import (
    PredictionInterval,
    conformal_interval,
    conformal_p,
    convert_target,
    jackknife_plus,
)
from .panel import PanelBlocks, PanelData, load_panel, split_and_center
from .ridge import (
    AugEstimate,
    BoundSketch,
    ConstantModel,
    ControlSVD,
    OutcomeModel,
    RidgeFit,
    RidgeModel,
    UnitMeanModel,
    augment_weights,
    augment_with_model,
    bound_sketch,
    fit_ridge,
    ridge_weights,
    svd_imbalance,
    verify_penalized_form,
    weight_norm_bound,
)
from .scm import DonorWeights, ScmConfig, imbalance, kkt_residual, solve_scm
from .selection import CvResult, default_lambda_grid, in_time_placebo, loo_cv, select_lambda
from .sim import (
    Ar3Dgp,
    FactorDgp,
    FixedEffectsDgp,
    McReport,
    default_dgp,
    default_estimator_bank,
    draw_panel,
    run_monte_carlo,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "PanelData",
    "PanelBlocks",
    "load_panel",
    "split_and_center",
    "ScmConfig",
    "DonorWeights",
    "solve_scm",
    "imbalance",
    "kkt_residual",
    "RidgeFit",
    "ControlSVD",
    "AugEstimate",
    "BoundSketch",
    "fit_ridge",
    "augment_weights",
    "ridge_weights",
    "verify_penalized_form",
    "svd_imbalance",
    "weight_norm_bound",
    "augment_with_model",
    "bound_sketch",
    "OutcomeModel",
    "RidgeModel",
    "UnitMeanModel",
    "ConstantModel",
    "CovariatePanel",
    "ResidualizedPanel",
    "joint_solve",
    "joint_augment",
    "residualize",
    "two_step_weights",
    "standardize_to_outcomes",
    "balance_table",
    "covariates_from_long",
    "CvResult",
    "loo_cv",
    "select_lambda",
    "in_time_placebo",
    "default_lambda_grid",
    "PredictionInterval",
    "conformal_p",
    "conformal_interval",
    "jackknife_plus",
    "convert_target",
    "EstimatorSpec",
    "estimate",
    "FactorDgp",
    "FixedEffectsDgp",
    "Ar3Dgp",
    "McReport",
    "draw_panel",
    "run_monte_carlo",
    "default_dgp",
    "default_estimator_bank",
    "PanelCtrlError",
    "PanelFormatError",
    "DuplicateCellError",
    "MissingCellError",
    "UnknownUnitError",
    "TreatmentTimeError",
    "ConfigError",
    "SingularityError",
    "ConvergenceError",
    "GridError",
]
