"""Average treatment effect estimators and the conditional-effect solver.

All ATE estimators here are linear in the target, so the estimating equation
``P_n{phi(Z; psi, eta_hat)} = 0`` is solved in closed form as
``psi_hat = P_n{m(Z; eta_hat)}``.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .core import DEFAULT_DELTA
from .exceptions import (
    DomainError,
    EvaluationError,
    FoldFitError,
    InsufficientDataError,
    PositivityError,
    SemicausalError,
    SingularDesignError,
)
from .inference import ConfidenceInterval, if_standard_error, wald_interval
from .nuisance import (
    NuisancePair,
    as_feature_map,
    fit_logistic,
    make_folds,
    make_learner,
    truncate_propensity,
)

_COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class EstimateReport:
    """Point estimate with its estimated influence values and Wald interval."""

    estimator: str
    psi_hat: float
    influence: np.ndarray
    se: float
    ci: ConfidenceInterval
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self):
        return int(self.influence.shape[0])

    @property
    def level(self):
        return self.ci.level

    def to_dict(self):
        return {
            "estimator": self.estimator,
            "psi_hat": float(self.psi_hat),
            "se": float(self.se),
            "ci": [float(self.ci.lower), float(self.ci.upper)],
            "level": float(self.ci.level),
            "n": self.n,
            "diagnostics": self.diagnostics,
        }


def _report(name, psi_hat, influence, level, diagnostics):
    se = if_standard_error(influence) if influence.shape[0] >= 2 else 0.0
    return EstimateReport(name, float(psi_hat), influence, se, wald_interval(psi_hat, se, level), diagnostics)


def _finite(values, what):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise EvaluationError(f"non-finite {what} at row {bad[0]}")
    return values


def _propensity_values(propensity, covariates):
    pi = np.asarray(propensity.predict(covariates), dtype=float)
    _finite(pi, "propensity prediction")
    bad = np.flatnonzero((pi <= 0) | (pi >= 1))
    if bad.size:
        raise PositivityError(f"propensity {pi[bad[0]]!r} at row {bad[0]} is outside (0, 1)")
    return pi


def plugin_ate(data, outcome):
    """G-formula plug-in ``P_n{mu(L,1) - mu(L,0)}``."""
    contrast = outcome.predict(data.covariates, 1) - outcome.predict(data.covariates, 0)
    _finite(np.asarray(contrast, dtype=float), "outcome prediction")
    return math.fsum(contrast) / data.n


def ipw_terms(data, pi):
    A, Y = data.treatment, data.outcome
    return A * Y / pi - (1 - A) * Y / (1 - pi)


def ipw_ate(data, propensity):
    """Horvitz-Thompson style IPW estimate ``P_n{AY/pi - (1-A)Y/(1-pi)}``."""
    pi = _propensity_values(propensity, data.covariates)
    return math.fsum(ipw_terms(data, pi)) / data.n


def aipw_terms(data, pi, mu1, mu0):
    """The two augmented terms ``m_1(Z)`` and ``m_0(Z)`` row by row."""
    A, Y = data.treatment, data.outcome
    m1 = A * (Y - mu1) / pi + mu1
    m0 = (1 - A) * (Y - mu0) / (1 - pi) + mu0
    return m1, m0


def _nuisance_values(data, nuisance):
    L = data.covariates
    pi = _propensity_values(nuisance.propensity, L)
    mu1 = _finite(np.asarray(nuisance.outcome.predict(L, 1), dtype=float), "outcome prediction")
    mu0 = _finite(np.asarray(nuisance.outcome.predict(L, 0), dtype=float), "outcome prediction")
    return pi, mu1, mu0


def _nuisance_diagnostics(data, nuisance):
    diag = {}
    prop = nuisance.propensity
    if hasattr(prop, "truncation_count"):
        diag["truncated"] = prop.truncation_count(data.covariates)
    out = nuisance.outcome
    if hasattr(out, "fallbacks"):
        L = data.covariates
        diag["kernel_fallbacks"] = int(out.fallbacks(L, np.ones(data.n)).sum() + out.fallbacks(L, np.zeros(data.n)).sum())
    diag["propensity_method"] = getattr(prop, "method", "custom")
    diag["outcome_method"] = getattr(out, "method", "custom")
    return diag


def aipw_ate(data, nuisance, level=0.95):
    """Doubly robust (augmented IPW) estimate of the average treatment effect.

    Influence values are ``m_1(Z_i) - m_0(Z_i) - psi_hat`` and have empirical
    mean zero by construction.
    """
    pi, mu1, mu0 = _nuisance_values(data, nuisance)
    m1, m0 = aipw_terms(data, pi, mu1, mu0)
    m = m1 - m0
    psi = math.fsum(m) / data.n
    return _report("aipw", psi, m - psi, level, _nuisance_diagnostics(data, nuisance))


def _resolve_learner(learner, seed):
    if callable(learner):
        return learner
    return make_learner(learner, seed=seed)


def crossfit_aipw(data, propensity_learner, outcome_learner, folds=5, seed=0, level=0.95, threads=1):
    """AIPW with nuisances fit on the complement of each of ``folds`` folds.

    Learners may be callables ``learner(data) -> fit`` or configuration
    blocks accepted by :func:`semicausal.nuisance.make_learner`.  Influence
    values are pooled over all rows and a single variance is computed.
    Folds may be fit on ``threads`` worker threads; results are merged in
    fold order.
    """
    if folds < 2:
        raise DomainError(f"cross-fitting needs at least 2 folds, got {folds}")
    if data.n < 2 * folds:
        raise InsufficientDataError(f"cross-fitting with {folds} folds needs n >= {2 * folds}, got {data.n}")
    fit_pi = _resolve_learner(propensity_learner, seed)
    fit_mu = _resolve_learner(outcome_learner, seed)
    fold_ids = make_folds(data.n, folds, seed)

    def one(k):
        test = np.flatnonzero(fold_ids == k)
        train = data.subset(np.flatnonzero(fold_ids != k))
        try:
            nuisance = NuisancePair(fit_pi(train), fit_mu(train))
        except (SemicausalError, np.linalg.LinAlgError) as exc:
            raise FoldFitError(k, exc) from exc
        held = data.subset(test)
        pi, mu1, mu0 = _nuisance_values(held, nuisance)
        m1, m0 = aipw_terms(held, pi, mu1, mu0)
        prop = nuisance.propensity
        truncated = prop.truncation_count(held.covariates) if hasattr(prop, "truncation_count") else 0
        return test, m1 - m0, truncated

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, range(folds)))
    else:
        parts = [one(k) for k in range(folds)]
    m = np.empty(data.n)
    for test, values, _ in parts:
        m[test] = values
    psi = math.fsum(m) / data.n
    diagnostics = {
        "folds": folds,
        "seed": seed,
        "fold_assignment": fold_ids.tolist(),
        "truncated": sum(p[2] for p in parts),
    }
    return _report("crossfit_aipw", psi, m - psi, level, diagnostics)


# ---------------------------------------------------------------- IPW with estimated logistic propensity

def _logistic_pieces(features, covariates, alpha, delta):
    X = features(covariates)
    raw = expit(X @ alpha)
    pi = truncate_propensity(raw, delta)
    inside = (raw >= delta) & (raw <= 1 - delta)
    dpi = np.where(inside, raw * (1 - raw), 0.0)[:, None] * X
    return X, raw, pi, dpi


def ipw_logistic_estfun(features, delta=DEFAULT_DELTA):
    """Stacked estimating function ``(phi_ipw, logistic score)`` in ``theta = (psi, alpha)``."""

    def estfun(data, theta):
        theta = np.asarray(theta, dtype=float)
        X, raw, pi, _ = _logistic_pieces(features, data.covariates, theta[1:], delta)
        phi = ipw_terms(data, pi) - theta[0]
        score = (data.treatment - raw)[:, None] * X
        return np.column_stack([phi, score])

    return estfun


def ipw_logistic_jacobian(features, delta=DEFAULT_DELTA):
    """Closed-form empirical mean Jacobian of :func:`ipw_logistic_estfun`."""

    def jacobian(data, theta):
        theta = np.asarray(theta, dtype=float)
        X, raw, pi, dpi = _logistic_pieces(features, data.covariates, theta[1:], delta)
        q = X.shape[1]
        jac = np.zeros((q + 1, q + 1))
        jac[0, 0] = -1.0
        jac[0, 1:] = _dphi_dalpha(data, pi, dpi).mean(axis=0)
        jac[1:, 1:] = _dscore_dalpha_mean(X, raw)
        return jac

    return jacobian


def _dphi_dalpha(data, pi, dpi):
    A, Y = data.treatment, data.outcome
    coef = -A * Y / pi**2 - (1 - A) * Y / (1 - pi) ** 2
    return coef[:, None] * dpi


def _dscore_dalpha_mean(X, raw):
    w = raw * (1 - raw)
    return -(X.T @ (X * w[:, None])) / X.shape[0]


def corrected_influence(phi, dphi_mean, dscore_mean, score):
    """``phi - P_n{dphi/dalpha^T} P_n{dS/dalpha}^{-1} S`` row by row."""
    dscore_mean = np.atleast_2d(dscore_mean)
    if not np.all(np.isfinite(dscore_mean)) or np.linalg.cond(dscore_mean) > _COND_LIMIT:
        raise SingularDesignError("mean derivative of the propensity score equations is singular")
    direction = np.linalg.solve(dscore_mean.T, np.asarray(dphi_mean, dtype=float))
    return np.asarray(phi, dtype=float) - np.atleast_2d(score) @ direction


def ipw_estimated_parametric(data, features=None, level=0.95, delta=DEFAULT_DELTA, fit=None):
    """IPW with a logistic propensity fitted by maximum likelihood.

    The influence values account for estimation of the propensity model via
    the stacked estimating equations of the IPW moment and the logistic
    score; both derivative matrices are evaluated in closed form.
    """
    if fit is None:
        fit = fit_logistic(data, features, delta=delta)
    fmap = fit.features
    alpha = fit.coef
    X, raw, pi, dpi = _logistic_pieces(fmap, data.covariates, alpha, fit.delta)
    terms = ipw_terms(data, pi)
    psi = math.fsum(terms) / data.n
    phi = terms - psi
    score = (data.treatment - raw)[:, None] * X
    dphi = _dphi_dalpha(data, pi, dpi).mean(axis=0)
    dscore = _dscore_dalpha_mean(X, raw)
    influence = corrected_influence(phi, dphi, dscore, score)
    diagnostics = {
        "alpha": [float(v) for v in alpha],
        "irls_iterations": int(fit.n_iter),
        "truncated": fit.truncation_count(data.covariates),
        "se_known_propensity_formula": float(if_standard_error(phi)) if data.n >= 2 else 0.0,
    }
    return _report("ipw_estimated", psi, influence, level, diagnostics)


def ipw_report(data, propensity, level=0.95):
    """IPW estimate with the influence function that treats ``propensity`` as known."""
    pi = _propensity_values(propensity, data.covariates)
    terms = ipw_terms(data, pi)
    psi = math.fsum(terms) / data.n
    return _report("ipw", psi, terms - psi, level, {"truncated": propensity.truncation_count(data.covariates)
                                                    if hasattr(propensity, "truncation_count") else 0})


# ---------------------------------------------------------------- conditional effects

def conditional_effect_ipw(data, propensity, basis):
    """Coefficients of a linear effect model ``gamma(v) = psi^T b(v)``.

    Solves ``P_n{(A / pi(L)) b(V) (Y - psi^T b(V))} = 0``, a weighted least
    squares fit on the treated rows with weights ``1 / pi(L)``.  ``basis``
    maps the covariate matrix to the basis matrix (a callable, or a list of
    feature terms as accepted by :class:`~semicausal.nuisance.PolynomialFeatures`).
    """
    B = as_feature_map(basis, data.d)(data.covariates)
    pi = _propensity_values(propensity, data.covariates)
    w = data.treatment / pi
    gram = B.T @ (B * w[:, None]) / data.n
    rhs = B.T @ (w * data.outcome) / data.n
    if not np.all(np.isfinite(gram)) or np.linalg.cond(gram) > _COND_LIMIT:
        raise SingularDesignError("weighted Gram matrix of the effect basis is singular")
    return np.linalg.solve(gram, rhs)
