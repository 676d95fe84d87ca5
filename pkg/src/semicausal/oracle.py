"""Exact checks of efficiency theory on finite discrete distributions.

Nuisance functions are passed as plain callables: a propensity ``pi(L)``
returning one probability per covariate row, and an outcome regression
``mu(L, a)`` returning one mean per row for the scalar arm ``a``.  Fitted
objects from :mod:`semicausal.nuisance` are accepted as well.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import DiscreteDistribution, evaluate, exact_mean, true_ate
from .exceptions import DomainError, PositivityError, SemicausalError

DEFAULT_STEP = 1e-4
DEFAULT_TOL = 1e-6
MEAN_ZERO_TOL = 1e-12


def _pi_callable(pi):
    return pi.predict if hasattr(pi, "predict") and not callable(pi) else pi


def _mu_callable(mu):
    return mu.predict if hasattr(mu, "predict") and not callable(mu) else mu


def true_nuisance(dist):
    """The distribution's own propensity score and outcome regression."""
    return dist.propensity, dist.outcome_regression


def aipw_moment(pi, mu):
    """``m(Z) = m_1(Z) - m_0(Z)`` for fixed nuisance functions."""
    pi, mu = _pi_callable(pi), _mu_callable(mu)

    def m(L, A, Y):
        p = np.asarray(pi(L), dtype=float)
        mu1 = np.asarray(mu(L, 1), dtype=float)
        mu0 = np.asarray(mu(L, 0), dtype=float)
        return A * (Y - mu1) / p + mu1 - (1 - A) * (Y - mu0) / (1 - p) - mu0

    return m


def efficient_influence_function(dist):
    """``m_1 - m_0 - psi`` built from the distribution's true nuisances."""
    psi = true_ate(dist)
    m = aipw_moment(*true_nuisance(dist))
    return lambda L, A, Y: m(L, A, Y) - psi


def ipw_influence_function(dist):
    """Influence function of the IPW estimator with known propensity."""
    psi = true_ate(dist)
    pi = dist.propensity
    return lambda L, A, Y: A * Y / pi(L) - (1 - A) * Y / (1 - pi(L)) - psi


# ---------------------------------------------------------------- submodels

@dataclass(frozen=True, eq=False)
class Submodel:
    """One-dimensional perturbation ``p_eps = p_0 (1 + eps g)`` of a base law."""

    base: DiscreteDistribution
    g: np.ndarray

    def __post_init__(self):
        g = self.g
        if callable(g):
            g = evaluate(g, self.base.covariates, self.base.treatment, self.base.outcome)
        g = np.array(g, dtype=float)
        if g.shape != (len(self.base),):
            raise DomainError(f"perturbation has {g.shape} values for {len(self.base)} atoms")
        if not np.all(np.isfinite(g)):
            raise DomainError("perturbation values must be finite")
        mean = math.fsum(self.base.mass * g)
        if abs(mean) > MEAN_ZERO_TOL:
            raise DomainError(f"perturbation has mean {mean!r} under the base distribution, not 0")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)

    @property
    def bound(self):
        """``M = max |g|`` over the support."""
        return float(np.max(np.abs(self.g)))

    @property
    def max_epsilon(self):
        M = self.bound
        return math.inf if M == 0 else 1.0 / M


def perturb(sub, epsilon):
    """The submodel member at ``epsilon``."""
    if not abs(epsilon) < sub.max_epsilon:
        raise DomainError(f"|epsilon| = {abs(epsilon)!r} is not below 1/M = {sub.max_epsilon!r}")
    return sub.base.with_mass(sub.base.mass * (1.0 + epsilon * sub.g))


def pathwise_derivative(sub, functional, step=DEFAULT_STEP, richardson=True):
    """Derivative of ``functional(P_eps)`` at ``eps = 0`` by central differences.

    With ``richardson`` the estimates at ``step`` and ``step / 2`` are
    combined to cancel the second-order error term.
    """

    def central(h):
        try:
            up = functional(perturb(sub, h))
            down = functional(perturb(sub, -h))
        except SemicausalError as exc:
            raise type(exc)(f"functional failed along the submodel at epsilon=+/-{h!r}: {exc}") from exc
        return (up - down) / (2.0 * h)

    coarse = central(step)
    if not richardson:
        return coarse
    fine = central(step / 2.0)
    return (4.0 * fine - coarse) / 3.0


def eif_covariance(sub, phi):
    """``P(phi S_eps)`` with the submodel score ``S_eps = g``."""
    values = evaluate(phi, sub.base.covariates, sub.base.treatment, sub.base.outcome)
    g = sub.g
    return exact_mean(lambda L, A, Y: values * g, sub.base)


def random_perturbation(base, rng):
    """Mean-zero perturbation with sup-norm one: uniform draws, centred, rescaled."""
    rng = np.random.default_rng(rng)
    g = rng.uniform(-1.0, 1.0, size=len(base))
    g = g - math.fsum(base.mass * g)
    return g / np.max(np.abs(g))


def known_propensity_perturbation(base, g):
    """Remove the treatment-mechanism part of a perturbation.

    Returns ``g - E(g | L, A) + E(g | L)``, which has the same mean and
    leaves ``P(A=1 | L)`` exactly unchanged along the submodel.  These are
    the scores of the model in which the propensity score is known.
    """
    if callable(g):
        g = evaluate(g, base.covariates, base.treatment, base.outcome)
    g = np.asarray(g, dtype=float)
    lev = base.level_index
    arm = base.treatment.astype(int)
    m = base.levels.shape[0]
    by_arm = np.zeros((m, 2))
    np.add.at(by_arm, (lev, arm), base.mass * g)
    by_level = by_arm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond_arm = np.where(base.arm_mass > 0, by_arm / base.arm_mass, 0.0)
        cond_level = np.where(base.level_mass > 0, by_level / base.level_mass, 0.0)
    out = g - cond_arm[lev, arm] + cond_level[lev]
    out = out - math.fsum(base.mass * out)
    scale = np.max(np.abs(out))
    return out / scale if scale > 0 else out


def random_distribution(rng, n_levels=2, n_outcomes=3, delta=0.05):
    """Random law on ``n_levels x 2 x n_outcomes`` atoms with positivity ``delta``.

    Covariate levels are ``0, 1, ...``; outcome values are distinct per arm
    and level and rounded to 1e-3 so that they are exactly representable
    in JSON round trips.
    """
    rng = np.random.default_rng(rng)
    level_mass = rng.dirichlet(np.full(n_levels, 2.0))
    prop = rng.uniform(max(delta, 0.15), min(1 - delta, 0.85), size=n_levels)
    L, A, Y, P = [], [], [], []
    for l in range(n_levels):
        for a in (0, 1):
            ys = np.round(rng.normal(loc=1.0 + l + a * (1.0 + 0.5 * l), scale=1.5, size=n_outcomes), 3)
            while np.unique(ys).size < n_outcomes:
                ys = np.round(rng.normal(loc=1.0 + l, scale=1.5, size=n_outcomes), 3)
            cond = rng.dirichlet(np.full(n_outcomes, 2.0))
            arm = prop[l] if a == 1 else 1.0 - prop[l]
            for y, c in zip(ys, cond):
                L.append([float(l)])
                A.append(a)
                Y.append(float(y))
                P.append(level_mass[l] * arm * c)
    return DiscreteDistribution(np.array(L), A, Y, P, delta=delta)


# ---------------------------------------------------------------- EIF check

@dataclass
class EIFCheck:
    records: list
    mean: float
    variance: float
    tol: float
    passed: bool
    mean_ok: bool

    def to_dict(self):
        return {
            "records": self.records,
            "mean": self.mean,
            "variance": self.variance,
            "tol": self.tol,
            "passed": self.passed,
            "mean_ok": self.mean_ok,
            "max_gap": max((r["gap"] for r in self.records), default=0.0),
        }


def check_eif(base, phi, perturbations, tol=DEFAULT_TOL, step=DEFAULT_STEP, functional=true_ate, threads=1):
    """Compare the pathwise derivative of ``functional`` with ``P(phi g)``.

    ``passed`` holds when every gap is at most ``tol``; ``mean_ok`` records
    whether ``phi`` has mean zero (within ``tol``) under ``base``, which any
    influence function must.
    """
    def one(item):
        i, g = item
        try:
            sub = Submodel(base, g)
        except DomainError as exc:
            raise DomainError(f"perturbation {i} rejected: {exc}") from exc
        derivative = pathwise_derivative(sub, functional, step=step)
        covariance = eif_covariance(sub, phi)
        return {"index": i, "derivative": derivative, "covariance": covariance,
                "gap": abs(derivative - covariance)}

    items = list(enumerate(perturbations))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, items))
    else:
        records = [one(item) for item in items]
    mean = exact_mean(phi, base)
    variance = exact_mean(lambda L, A, Y: evaluate(phi, L, A, Y) ** 2, base) - mean**2
    passed = all(r["gap"] <= tol for r in records)
    return EIFCheck(records, mean, variance, tol, passed, abs(mean) <= tol)


# ---------------------------------------------------------------- double robustness

def _check_band(base, pi, delta):
    values = np.asarray(pi(base.levels), dtype=float)
    live = base.level_mass > 0
    bad = np.flatnonzero(live & ((values < delta) | (values > 1 - delta) | ~np.isfinite(values)))
    if bad.size:
        raise PositivityError(
            f"supplied propensity {values[bad[0]]!r} at level {base.levels[bad[0]].tolist()} "
            f"is outside [{delta}, {1 - delta}]"
        )


def _delta_of(base, delta):
    delta = base.delta if delta is None else delta
    if delta is None:
        raise DomainError("no positivity level given and the distribution has none")
    return delta


def exact_bias(base, pi, mu, delta=None):
    """``P{m(Z; pi, mu)} - psi_0`` by finite summation over the atoms."""
    pi, mu = _pi_callable(pi), _mu_callable(mu)
    _check_band(base, pi, _delta_of(base, delta))
    return exact_mean(aipw_moment(pi, mu), base) - true_ate(base)


def cross_term(base, pi, mu):
    """``sum_a P[(pi_0 - pi)(mu_0(.,a) - mu(.,a)) / w_a(pi)]`` over covariate levels.

    ``w_1 = pi`` and ``w_0 = 1 - pi``.  Computed directly from the level
    tables, independently of :func:`exact_bias`.
    """
    pi, mu = _pi_callable(pi), _mu_callable(mu)
    live = base.level_mass > 0
    levels = base.levels[live]
    weight = base.level_mass[live]
    p = np.asarray(pi(levels), dtype=float)
    dpi = base.level_propensity[live] - p
    total = 0.0
    for a, w in ((1, p), (0, 1.0 - p)):
        dmu = base.level_outcome_mean[live, a] - np.asarray(mu(levels, a), dtype=float)
        total += math.fsum(weight * dpi * dmu / w)
    return total


def l2_norm(base, values):
    """L2(P) norm over the covariate margin of per-level values."""
    live = base.level_mass > 0
    v = np.asarray(values, dtype=float)[live]
    return math.sqrt(math.fsum(base.level_mass[live] * v * v))


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    passed: bool
    pi_error: float = 0.0
    mu_error: tuple = field(default=(0.0, 0.0))


def product_bound_check(base, pi, mu, delta=None):
    """Check ``|bias| <= (1/delta) sum_a ||pi - pi_0|| ||mu_a - mu_0,a||``."""
    pi, mu = _pi_callable(pi), _mu_callable(mu)
    delta = _delta_of(base, delta)
    lhs = abs(exact_bias(base, pi, mu, delta))
    levels = base.levels
    pi_err = l2_norm(base, np.asarray(pi(levels), dtype=float) - base.level_propensity)
    mu_err = tuple(
        l2_norm(base, np.where(base.level_mass > 0, np.asarray(mu(levels, a), dtype=float) - base.level_outcome_mean[:, a], 0.0))
        for a in (0, 1)
    )
    rhs = (pi_err * mu_err[0] + pi_err * mu_err[1]) / delta
    return BoundCheck(lhs, rhs, lhs <= rhs + 1e-12, pi_err, mu_err)


def level_function(base, values):
    """Callable returning ``values[level]`` for covariate rows of ``base``."""
    values = np.asarray(values, dtype=float)
    return lambda L: values[base.level_of(L)]


def level_outcome_function(base, table):
    """Callable ``mu(L, a)`` from a ``(levels, 2)`` table of means."""
    table = np.asarray(table, dtype=float)
    return lambda L, a: table[base.level_of(L), a]
