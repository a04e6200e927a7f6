"""Tree boosting with Gaussian process and grouped random effects.

The package jointly estimates a non-parametric tree-ensemble mean function
and the covariance parameters of Gaussian process / grouped random
effects, supports exact and nearest-neighbor (Vecchia) likelihoods, and
produces probabilistic predictions.
"""

from .effects import (
    EXPONENTIAL,
    GAUSSIAN,
    CovarianceParameters,
    GpComponent,
    GroupedComponent,
    NonPositiveDefiniteError,
    RandomEffectsDesign,
    empty_design,
    gp_design,
    grouped_design,
)
from .covariance import assemble_psi, psi_derivative, psi_matrix
from .likelihood import (
    OptimizerConfig,
    default_initial_params,
    fisher_information,
    grad_theta,
    nll,
    optimize_covariance,
    profile_sigma2,
)
from .tree import RegressionTree, TreeParams, fit_tree, gls_leaf_values, predict_tree
from .boosting import BoostConfig, FittedModel, TreeEnsemble, gpboost_fit, gpboostoos_fit
from .prediction import (
    PredictiveDistribution,
    predict_exact,
    predict_quantile,
    predict_sum,
)
from .scoring import crps_gaussian, paired_t_pvalue, quantile_loss, rmse

__version__ = "0.1.0"

__all__ = [
    "EXPONENTIAL",
    "GAUSSIAN",
    "BoostConfig",
    "CovarianceParameters",
    "FittedModel",
    "GpComponent",
    "GroupedComponent",
    "NonPositiveDefiniteError",
    "OptimizerConfig",
    "PredictiveDistribution",
    "RandomEffectsDesign",
    "RegressionTree",
    "TreeEnsemble",
    "TreeParams",
    "assemble_psi",
    "crps_gaussian",
    "default_initial_params",
    "empty_design",
    "fisher_information",
    "fit_tree",
    "gls_leaf_values",
    "gp_design",
    "gpboost_fit",
    "gpboostoos_fit",
    "grad_theta",
    "grouped_design",
    "nll",
    "optimize_covariance",
    "paired_t_pvalue",
    "predict_exact",
    "predict_quantile",
    "predict_sum",
    "predict_tree",
    "profile_sigma2",
    "psi_derivative",
    "psi_matrix",
    "quantile_loss",
    "rmse",
]
