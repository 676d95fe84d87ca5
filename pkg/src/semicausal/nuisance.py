"""Nuisance learners: propensity score and outcome regression fits.

Every fit is an immutable object.  Propensity fits expose
``predict(L) -> probabilities`` (always truncated to ``[delta, 1 - delta]``);
outcome fits expose ``predict(L, a) -> means`` where ``a`` is a scalar arm or
a vector of arms.  A *learner* is any callable ``learner(data) -> fit``;
:func:`make_learner` builds learners from configuration dictionaries.
"""

import logging
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .core import DEFAULT_DELTA
from .exceptions import (
    ConvergenceError,
    DomainError,
    EnsembleError,
    InsufficientDataError,
    SemicausalError,
    SeparationError,
    SingularDesignError,
)

logger = logging.getLogger(__name__)

SCORE_TOL = 1e-8
STEP_TOL = 1e-10
MAX_IRLS_ITER = 100
SEPARATION_BOUND = 30.0
SIMPLEX_TOL = 1e-10
SIMPLEX_MAX_ITER = 10_000

_TERM = re.compile(r"^l(\d+)(?:\^(\d+))?$")


def truncate_propensity(p, delta=DEFAULT_DELTA):
    """Clip probabilities to ``[delta, 1 - delta]``."""
    if not 0.0 < delta < 0.5:
        raise DomainError(f"delta must lie in (0, 0.5), got {delta!r}")
    out = np.minimum(np.maximum(p, delta), 1.0 - delta)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------- features

@dataclass(frozen=True)
class PolynomialFeatures:
    """Design map built from monomials of the covariates.

    Terms are strings such as ``"l1"``, ``"l2^2"`` or ``"l1*l3"`` (covariates
    are numbered from 1).  An intercept column comes first unless disabled.
    """

    terms: tuple = ()
    intercept: bool = True
    _parsed: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        parsed = []
        for term in self.terms:
            factors = []
            for piece in str(term).replace(" ", "").split("*"):
                match = _TERM.match(piece)
                if not match or int(match.group(1)) < 1:
                    raise DomainError(f"cannot parse feature term {term!r}")
                factors.append((int(match.group(1)) - 1, int(match.group(2) or 1)))
            parsed.append(tuple(factors))
        object.__setattr__(self, "terms", tuple(str(t) for t in self.terms))
        object.__setattr__(self, "_parsed", tuple(parsed))
        if not self.terms and not self.intercept:
            raise DomainError("a feature map needs at least one column")

    @property
    def names(self):
        return (["1"] if self.intercept else []) + list(self.terms)

    def __call__(self, covariates):
        L = np.asarray(covariates, dtype=float)
        if L.ndim == 1:
            L = L[:, None]
        cols = [np.ones(L.shape[0])] if self.intercept else []
        for factors in self._parsed:
            col = np.ones(L.shape[0])
            for j, power in factors:
                if j >= L.shape[1]:
                    raise DomainError(f"feature refers to l{j + 1} but data has {L.shape[1]} covariates")
                col = col * L[:, j] ** power
            cols.append(col)
        return np.column_stack(cols)


def linear_features(d):
    """Intercept plus every covariate entering linearly."""
    return PolynomialFeatures(tuple(f"l{j + 1}" for j in range(d)))


def as_feature_map(features, d):
    if features is None:
        return linear_features(d)
    if callable(features):
        return features
    return PolynomialFeatures(tuple(features))


# ---------------------------------------------------------------- fits

class _PropensityBase:
    kind = "propensity"

    def predict(self, covariates):
        return truncate_propensity(np.asarray(self.raw_predict(covariates), dtype=float), self.delta)

    def truncation_count(self, covariates):
        raw = np.asarray(self.raw_predict(covariates), dtype=float)
        return int(np.count_nonzero((raw < self.delta) | (raw > 1 - self.delta)))


class _OutcomeBase:
    kind = "outcome"

    def predict(self, covariates, a):
        a = np.asarray(a)
        if a.ndim == 0:
            return self._predict_arm(covariates, int(a))
        out = np.where(a == 1, self._predict_arm(covariates, 1), self._predict_arm(covariates, 0))
        return out.astype(float)


@dataclass(frozen=True, eq=False)
class LogisticPropensity(_PropensityBase):
    coef: np.ndarray
    features: object
    delta: float = DEFAULT_DELTA
    n_iter: int = 0
    method: str = "logistic"

    def linear_predictor(self, covariates):
        return self.features(covariates) @ self.coef

    def raw_predict(self, covariates):
        return expit(self.linear_predictor(covariates))


@dataclass(frozen=True, eq=False)
class FunctionPropensity(_PropensityBase):
    """Propensity given by a fixed function ``func(L) -> probabilities``."""

    func: object
    delta: float = DEFAULT_DELTA
    method: str = "fixed"

    def raw_predict(self, covariates):
        return np.broadcast_to(np.asarray(self.func(covariates), dtype=float), (len(covariates),))


@dataclass(frozen=True, eq=False)
class EnsemblePropensity(_PropensityBase):
    candidates: tuple
    weights: np.ndarray
    delta: float = DEFAULT_DELTA
    diagnostics: dict = field(default_factory=dict)
    method: str = "ensemble"

    def raw_predict(self, covariates):
        preds = np.column_stack([c.predict(covariates) for c in self.candidates])
        return preds @ self.weights


@dataclass(frozen=True, eq=False)
class LinearOutcome(_OutcomeBase):
    """Separate least-squares fits in each treatment arm."""

    coef: tuple  # (arm 0 coefficients, arm 1 coefficients)
    features: object
    method: str = "ols"

    def _predict_arm(self, covariates, arm):
        return self.features(covariates) @ self.coef[arm]


@dataclass(frozen=True, eq=False)
class FunctionOutcome(_OutcomeBase):
    """Outcome regression given by a fixed function ``func(L, a) -> means``."""

    func: object
    method: str = "fixed"

    def _predict_arm(self, covariates, arm):
        return np.broadcast_to(np.asarray(self.func(covariates, arm), dtype=float), (len(covariates),))


@dataclass(frozen=True, eq=False)
class KernelOutcome(_OutcomeBase):
    """Nadaraya-Watson regression per arm with a Gaussian product kernel."""

    train: tuple  # per arm: standardised covariates
    response: tuple  # per arm: outcomes
    center: np.ndarray
    scale: np.ndarray
    bandwidth: np.ndarray
    method: str = "kernel"
    block: int = 1024

    def _weights_sum(self, covariates, arm):
        Q = (np.asarray(covariates, dtype=float).reshape(len(covariates), -1) - self.center) / self.scale
        X, y = self.train[arm], self.response[arm]
        num = np.empty(Q.shape[0])
        den = np.empty(Q.shape[0])
        for start in range(0, Q.shape[0], self.block):
            q = Q[start:start + self.block]
            diff = (q[:, None, :] - X[None, :, :]) / self.bandwidth
            w = np.exp(-0.5 * np.sum(diff * diff, axis=2))
            num[start:start + self.block] = w @ y
            den[start:start + self.block] = w.sum(axis=1)
        return num, den

    def _predict_arm(self, covariates, arm):
        num, den = self._weights_sum(covariates, arm)
        ok = den > 0
        out = np.full(num.shape, self.response[arm].mean())
        out[ok] = num[ok] / den[ok]
        return out

    def fallbacks(self, covariates, a):
        """Boolean mask of queries whose kernel weights all underflowed."""
        a = np.broadcast_to(np.asarray(a), (len(covariates),))
        mask = np.zeros(len(covariates), dtype=bool)
        for arm in (0, 1):
            rows = a == arm
            if np.any(rows):
                mask[rows] = self._weights_sum(np.asarray(covariates)[rows], arm)[1] == 0
        return mask


@dataclass(frozen=True, eq=False)
class EnsembleOutcome(_OutcomeBase):
    candidates: tuple
    weights: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    method: str = "ensemble"

    def _predict_arm(self, covariates, arm):
        preds = np.column_stack([c.predict(covariates, arm) for c in self.candidates])
        return preds @ self.weights


@dataclass(frozen=True)
class NuisancePair:
    propensity: object
    outcome: object

    def __post_init__(self):
        if self.propensity is None or self.outcome is None:
            raise DomainError("a nuisance pair needs both a propensity and an outcome fit")


# ---------------------------------------------------------------- learners

def _check_rank(X, what):
    if X.shape[0] < X.shape[1] or np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularDesignError(f"{what} design matrix ({X.shape[0]}x{X.shape[1]}) is rank deficient")


def _loglik(eta, A):
    return float(np.sum(A * eta - np.logaddexp(0.0, eta)))


def fit_logistic(data, features=None, delta=DEFAULT_DELTA, max_iter=MAX_IRLS_ITER):
    """Maximum-likelihood logistic propensity model by IRLS.

    Converges when the largest component of the mean score falls below 1e-8
    or the parameter update is smaller than 1e-10.

    Raises
    ------
    SingularDesignError
        The design is rank deficient.
    SeparationError
        Some linear predictor exceeds 30 in absolute value.
    ConvergenceError
        ``max_iter`` iterations without convergence; ``last_iterate`` holds
        the final coefficients.
    """
    fmap = as_feature_map(features, data.d)
    X = fmap(data.covariates)
    A = data.treatment
    n = X.shape[0]
    _check_rank(X, "propensity")
    beta = np.zeros(X.shape[1])
    eta = X @ beta
    for it in range(1, max_iter + 1):
        p = expit(eta)
        score = X.T @ (A - p) / n
        if np.max(np.abs(score)) < SCORE_TOL:
            return LogisticPropensity(beta, fmap, delta, it - 1)
        w = p * (1.0 - p)
        hess = X.T @ (X * w[:, None]) / n
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            raise SingularDesignError("IRLS weighted Gram matrix is singular") from None
        ll = _loglik(eta, A)
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            cand_eta = X @ cand
            if np.max(np.abs(cand_eta)) <= SEPARATION_BOUND and _loglik(cand_eta, A) >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        if np.max(np.abs(cand_eta)) > SEPARATION_BOUND:
            raise SeparationError(
                "linear predictor exceeds 30 in absolute value; treatment is (quasi-)separated",
                last_iterate=cand,
            )
        converged = np.max(np.abs(cand - beta)) < STEP_TOL
        beta, eta = cand, cand_eta
        if converged:
            return LogisticPropensity(beta, fmap, delta, it)
    raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations", last_iterate=beta)


def fit_outcome_linear(data, features=None):
    """Ordinary least squares fitted separately within each treatment arm."""
    fmap = as_feature_map(features, data.d)
    X = fmap(data.covariates)
    coef = []
    for arm in (0, 1):
        rows = data.treatment == arm
        count = int(np.count_nonzero(rows))
        if count == 0:
            raise InsufficientDataError(f"treatment arm {arm} has no observations")
        if count < X.shape[1]:
            raise InsufficientDataError(
                f"treatment arm {arm} has {count} observations for {X.shape[1]} features"
            )
        Xa = X[rows]
        _check_rank(Xa, f"arm {arm} outcome")
        beta, *_ = np.linalg.lstsq(Xa, data.outcome[rows], rcond=None)
        coef.append(beta)
    return LinearOutcome(tuple(coef), fmap)


def silverman_bandwidth(n, kappa=0.0):
    """Rule-of-thumb bandwidth for one standardised dimension, times ``n**-kappa``."""
    return 1.06 * n ** (-0.2) * n ** (-kappa)


def fit_outcome_kernel(data, bandwidth=None, kappa=0.0):
    """Nadaraya-Watson outcome regression per arm on standardised covariates.

    ``bandwidth`` may be a scalar or one value per covariate; by default the
    rule of thumb of :func:`silverman_bandwidth` is used.  Query points where
    every kernel weight underflows fall back to the arm mean (see
    :meth:`KernelOutcome.fallbacks`).
    """
    L = data.covariates
    if bandwidth is None:
        bandwidth = silverman_bandwidth(data.n, kappa)
    h = np.broadcast_to(np.asarray(bandwidth, dtype=float), (data.d,)).copy()
    if np.any(~(h > 0)):
        raise DomainError(f"bandwidth must be positive, got {bandwidth!r}")
    center = L.mean(axis=0)
    scale = L.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (L - center) / scale
    train, response = [], []
    for arm in (0, 1):
        rows = data.treatment == arm
        if not np.any(rows):
            raise InsufficientDataError(f"treatment arm {arm} has no observations")
        train.append(Z[rows])
        response.append(np.array(data.outcome[rows]))
    return KernelOutcome(tuple(train), tuple(response), center, scale, h)


def fixed_propensity(func, delta=DEFAULT_DELTA):
    return FunctionPropensity(func, delta)


def fixed_outcome(func):
    return FunctionOutcome(func)


# ---------------------------------------------------------------- ensemble

def make_folds(n, folds, seed):
    """Seeded uniform partition of ``range(n)`` into near-equal folds."""
    if folds < 2:
        raise DomainError(f"need at least 2 folds, got {folds}")
    if n < folds:
        raise InsufficientDataError(f"{n} observations cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    ids = np.empty(n, dtype=int)
    ids[perm] = np.arange(n) % folds
    return ids


def simplex_least_squares(Z, y, tol=SIMPLEX_TOL, max_iter=SIMPLEX_MAX_ITER):
    """Minimise ``mean((y - Z w)^2)`` over the probability simplex.

    Pairwise projected coordinate descent: each step moves mass from the
    coordinate with the largest gradient to the one with the smallest along
    the exact line minimiser, which keeps the iterate feasible.  Starts from
    the best single column, so the result never has larger risk than any
    column.  Stops once an iteration lowers the risk by less than ``tol``.
    """
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = Z.shape
    Q = Z.T @ Z / n
    c = Z.T @ y / n
    yy = float(y @ y) / n

    def risk(w):
        return float(w @ Q @ w - 2.0 * c @ w + yy)

    col_risk = np.diag(Q) - 2.0 * c + yy
    w = np.zeros(k)
    w[int(np.argmin(col_risk))] = 1.0
    current = risk(w)
    for _ in range(max_iter):
        grad = 2.0 * (Q @ w - c)
        i = int(np.argmin(grad))
        support = np.flatnonzero(w > 0)
        j = int(support[np.argmax(grad[support])])
        if i == j or grad[j] - grad[i] <= 0:
            break
        curv = Q[i, i] + Q[j, j] - 2.0 * Q[i, j]
        t = w[j] if curv <= 0 else min(w[j], (grad[j] - grad[i]) / (2.0 * curv))
        trial = w.copy()
        trial[i] += t
        trial[j] -= t
        if trial[j] < 1e-15:
            trial[j] = 0.0
        trial /= trial.sum()
        new = risk(trial)
        if new > current:
            break
        w, improvement, current = trial, current - new, new
        if improvement < tol:
            break
    return w


def fit_ensemble(data, candidates, folds=5, seed=0, delta=DEFAULT_DELTA):
    """Cross-validated convex combination of candidate learners.

    Each candidate is a learner ``learner(data) -> fit``.  The kind of the
    ensemble (propensity or outcome) follows the candidates' fits.
    Candidates that fail on any fold are dropped and listed in
    ``diagnostics["dropped"]``.

    Raises
    ------
    EnsembleError
        If every candidate fails.
    """
    candidates = list(candidates)
    if not candidates:
        raise DomainError("an ensemble needs at least one candidate")
    fold_ids = make_folds(data.n, folds, seed)
    kind = None
    cv_preds, kept, dropped = [], [], []
    for idx, learner in enumerate(candidates):
        preds = np.empty(data.n)
        try:
            for k in range(folds):
                test = fold_ids == k
                fit = learner(data.subset(np.flatnonzero(~test)))
                if kind is None:
                    kind = fit.kind
                elif fit.kind != kind:
                    raise DomainError("ensemble candidates mix propensity and outcome learners")
                held = data.subset(np.flatnonzero(test))
                if fit.kind == "propensity":
                    preds[test] = fit.predict(held.covariates)
                else:
                    preds[test] = fit.predict(held.covariates, held.treatment)
        except DomainError:
            raise
        except (SemicausalError, np.linalg.LinAlgError) as exc:
            logger.info("ensemble candidate %d dropped on fold %d: %s", idx, k, exc)
            dropped.append({"candidate": idx, "fold": k, "error": str(exc)})
            continue
        cv_preds.append(preds)
        kept.append(idx)
    if not kept:
        raise EnsembleError(f"all {len(candidates)} ensemble candidates failed")
    Z = np.column_stack(cv_preds)
    target = data.treatment if kind == "propensity" else data.outcome
    weights = simplex_least_squares(Z, target)
    fits = []
    final_kept, final_weights = [], []
    for idx, wt in zip(kept, weights):
        try:
            fits.append(candidates[idx](data))
        except (SemicausalError, np.linalg.LinAlgError) as exc:
            dropped.append({"candidate": idx, "fold": None, "error": str(exc)})
            continue
        final_kept.append(idx)
        final_weights.append(wt)
    if not fits:
        raise EnsembleError("all ensemble candidates failed on the full sample")
    final_weights = np.asarray(final_weights)
    final_weights = final_weights / final_weights.sum()
    resid = target[:, None] - Z
    diagnostics = {
        "kept": final_kept,
        "dropped": dropped,
        "cv_risk": [float(v) for v in np.mean(resid * resid, axis=0)],
        "ensemble_cv_risk": float(np.mean((target - Z @ weights) ** 2)),
        "folds": folds,
        "seed": seed,
    }
    if kind == "propensity":
        return EnsemblePropensity(tuple(fits), final_weights, delta, diagnostics)
    return EnsembleOutcome(tuple(fits), final_weights, diagnostics)


# ---------------------------------------------------------------- config

_METHODS = ("logistic", "ols", "kernel", "ensemble")


def make_learner(config, seed=0):
    """Turn a learner configuration block into a learner callable.

    ``config`` keys: ``method`` (logistic | ols | kernel | ensemble),
    ``features`` (list of terms), ``bandwidth``, ``kappa``, ``candidates``
    (list of nested blocks), ``folds``, ``delta``, ``seed``.
    """
    if not isinstance(config, dict):
        raise DomainError(f"learner configuration must be a mapping, got {type(config).__name__}")
    method = config.get("method")
    if method not in _METHODS:
        raise DomainError(f"unknown learner method {method!r}; expected one of {_METHODS}")
    delta = float(config.get("delta", DEFAULT_DELTA))
    features = config.get("features")
    if method == "logistic":
        return lambda data: fit_logistic(data, features, delta=delta)
    if method == "ols":
        return lambda data: fit_outcome_linear(data, features)
    if method == "kernel":
        bandwidth = config.get("bandwidth")
        kappa = float(config.get("kappa", 0.0))
        return lambda data: fit_outcome_kernel(data, bandwidth, kappa)
    blocks = config.get("candidates") or []
    if not blocks:
        raise DomainError("ensemble configuration needs a nonempty 'candidates' list")
    learners = [make_learner(block, seed) for block in blocks]
    folds = int(config.get("folds", 5))
    ens_seed = int(config.get("seed", seed))
    return lambda data: fit_ensemble(data, learners, folds=folds, seed=ens_seed, delta=delta)
