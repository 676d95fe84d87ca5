"""Estimating an average treatment effect from one simulated dataset.

We draw 2000 rows from the default data-generating process, whose true
effect is exactly 1, and compare the plug-in, IPW and AIPW estimators.
Plug-in and IPW each lean on a single nuisance model; AIPW combines both
and comes with an influence-function standard error.

Run: python demos/01_estimators.py
"""

import numpy as np

from semicausal import NuisancePair, aipw_ate, crossfit_aipw, fit_logistic, fit_outcome_linear, ipw_ate, plugin_ate
from semicausal.estimators import ipw_estimated_parametric
from semicausal.simulation import DGPSpec

spec = DGPSpec()
data = spec.sample(2000, np.random.default_rng(1))
print(f"n = {data.n}, true ATE = {spec.truth():.4f}\n")

propensity = fit_logistic(data)
outcome = fit_outcome_linear(data)

print(f"plug-in (outcome model only)      {plugin_ate(data, outcome):.4f}")
print(f"IPW (propensity model only)       {ipw_ate(data, propensity):.4f}")

report = aipw_ate(data, NuisancePair(propensity, outcome))
print(f"AIPW                              {report.psi_hat:.4f}  se {report.se:.4f}  "
      f"95% CI [{report.ci.lower:.4f}, {report.ci.upper:.4f}]")

# Cross-fitting fits the nuisances on held-out folds, so flexible learners
# do not overfit the rows they are evaluated on.
cf = crossfit_aipw(data, fit_logistic, fit_outcome_linear, folds=5, seed=0)
print(f"cross-fitted AIPW                 {cf.psi_hat:.4f}  se {cf.se:.4f}")

# IPW with an estimated propensity: the stacked estimating equations account
# for the fitted logistic coefficients, which shrinks the standard error.
est = ipw_estimated_parametric(data)
print(f"\nIPW, estimated-propensity se      {est.se:.4f}")
print(f"IPW, se treating pi as known      {est.diagnostics['se_known_propensity_formula']:.4f}")
