"""Doubly robust estimation of average treatment effects with an exact oracle."""

from .core import (
    Dataset,
    DiscreteDistribution,
    empirical_mean,
    exact_mean,
    sample,
    true_ate,
)
from .estimators import (
    EstimateReport,
    aipw_ate,
    conditional_effect_ipw,
    crossfit_aipw,
    ipw_ate,
    ipw_estimated_parametric,
    plugin_ate,
)
from .inference import ConfidenceInterval, if_standard_error, sandwich_stacked, wald_interval
from .nuisance import (
    NuisancePair,
    fit_ensemble,
    fit_logistic,
    fit_outcome_kernel,
    fit_outcome_linear,
    truncate_propensity,
)

__version__ = "0.1.0"
