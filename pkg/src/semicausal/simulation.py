"""Data-generating processes with known truth and Monte-Carlo experiments.

The default process has a single covariate on the grid ``-2, -1, 0, 1, 2``
with equal masses, propensity ``expit(0.5 l - 0.25)``, outcome mean
``mu(l, a) = 1 + l + a (1 + 0.5 l)`` and standard normal noise, so the true
effect is exactly 1.  Because the covariate law is discrete, every truth
used below (the effect, limits of misspecified learners, exact biases) is
computed by finite summation through :mod:`semicausal.oracle`.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logit, ndtri

from .core import DEFAULT_DELTA, Dataset, DiscreteDistribution
from .estimators import (
    aipw_ate,
    crossfit_aipw,
    ipw_estimated_parametric,
    ipw_report,
)
from .exceptions import DomainError, MonteCarloError, PreconditionError, SemicausalError
from .nuisance import (
    FunctionOutcome,
    FunctionPropensity,
    NuisancePair,
    PolynomialFeatures,
    fit_logistic,
    fit_outcome_linear,
    truncate_propensity,
)
from .oracle import exact_bias

logger = logging.getLogger(__name__)

_MISSPEC = (None, "omission", "distortion")
MAX_FAILURE_RATE = 0.01
RELIABLE_REPS = 30


@dataclass(frozen=True)
class DGPSpec:
    """Discrete-covariate data-generating process with known nuisances.

    ``propensity_coef`` and each row of ``outcome_coef`` act on the design
    ``[1, l_1, ..., l_d]``; ``outcome_coef[a]`` gives the mean in arm ``a``.
    ``misspecify_propensity`` / ``misspecify_outcome`` choose how the
    parametric learners go wrong: ``"omission"`` fits an intercept only,
    ``"distortion"`` adds ``distortion_* * (|l|^2 - E|L|^2)`` (on the logit
    scale for the propensity) to a correctly specified fit.

    The ``rate_*`` fields drive synthetic nuisances
    ``pi_n = pi_0 + scale n^-rate_pi u_pi`` and
    ``mu_n = mu_0 + scale n^-rate_mu u_mu`` with
    ``u_pi(l) = 0.5 (l_1 - mean) / range`` and ``u_mu(l, a) = (l_1 - mean) / range``.
    """

    levels: tuple = (-2.0, -1.0, 0.0, 1.0, 2.0)
    level_mass: tuple = None
    propensity_coef: tuple = (-0.25, 0.5)
    outcome_coef: tuple = ((1.0, 1.0), (2.0, 1.5))
    noise_sd: float = 1.0
    delta: float = DEFAULT_DELTA
    misspecify_propensity: str = None
    misspecify_outcome: str = None
    distortion_propensity: float = 0.75
    distortion_outcome: float = 0.75
    rate_pi: float = 0.25
    rate_mu: float = 0.25
    rate_scale: float = 1.0
    perturb_pi: bool = True
    perturb_mu: bool = True

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=float)
        if levels.ndim == 1:
            levels = levels[:, None]
        object.__setattr__(self, "levels", tuple(tuple(float(v) for v in row) for row in levels))
        k, d = levels.shape
        if self.level_mass is None:
            mass = np.full(k, 1.0 / k)
        else:
            mass = np.asarray(self.level_mass, dtype=float)
            if mass.shape != (k,) or np.any(mass < 0) or abs(math.fsum(mass) - 1) > 1e-9:
                raise DomainError("level_mass must be a probability vector over the levels")
            mass = mass / math.fsum(mass)
        object.__setattr__(self, "level_mass", tuple(float(v) for v in mass))
        object.__setattr__(self, "propensity_coef", tuple(float(v) for v in self.propensity_coef))
        object.__setattr__(self, "outcome_coef", tuple(tuple(float(v) for v in row) for row in self.outcome_coef))
        if len(self.propensity_coef) != d + 1:
            raise DomainError(f"propensity_coef needs {d + 1} entries for {d} covariates")
        if len(self.outcome_coef) != 2 or any(len(row) != d + 1 for row in self.outcome_coef):
            raise DomainError(f"outcome_coef needs two rows of {d + 1} entries")
        for name in ("misspecify_propensity", "misspecify_outcome"):
            if getattr(self, name) not in _MISSPEC:
                raise DomainError(f"{name} must be one of {_MISSPEC}")
        if not (self.noise_sd >= 0 and math.isfinite(self.noise_sd)):
            raise DomainError("noise_sd must be finite and nonnegative")
        if self.rate_pi < 0 or self.rate_mu < 0:
            raise DomainError("rates must be nonnegative")
        if not 0 < self.delta < 0.5:
            raise DomainError("delta must lie in (0, 0.5)")
        pi = self.propensity(self.level_array)
        if np.any(pi < self.delta) or np.any(pi > 1 - self.delta):
            raise DomainError("true propensity leaves [delta, 1 - delta] on the covariate grid")

    # -------------------------------------------------------------- truth

    @property
    def level_array(self):
        return np.array(self.levels, dtype=float)

    @property
    def d(self):
        return len(self.levels[0])

    def _design(self, covariates):
        L = np.asarray(covariates, dtype=float).reshape(len(covariates), -1)
        return np.column_stack([np.ones(L.shape[0]), L])

    def propensity(self, covariates):
        return expit(self._design(covariates) @ np.array(self.propensity_coef))

    def outcome_mean(self, covariates, a):
        X = self._design(covariates)
        beta = np.array(self.outcome_coef)
        a = np.asarray(a)
        if a.ndim == 0:
            return X @ beta[int(a)]
        return np.where(a == 1, X @ beta[1], X @ beta[0])

    def truth(self):
        """Closed-form effect ``sum_l P(l) [mu(l,1) - mu(l,0)]``."""
        L = self.level_array
        return math.fsum(np.array(self.level_mass) * (self.outcome_mean(L, 1) - self.outcome_mean(L, 0)))

    def discrete_law(self):
        """Exact discrete law with the same ``(L, A)`` law and conditional means.

        The noise is replaced by the two-point law ``+/- noise_sd``, which
        keeps every conditional mean (hence every quantity the oracle uses).
        """
        L, A, Y, P = [], [], [], []
        levels = self.level_array
        pi = self.propensity(levels)
        for row, pl, p1 in zip(levels, self.level_mass, pi):
            for a, pa in ((0, 1.0 - p1), (1, p1)):
                mu = float(self.outcome_mean(row[None, :], a)[0])
                noise = (0.0,) if self.noise_sd == 0 else (-self.noise_sd, self.noise_sd)
                for e in noise:
                    L.append(row)
                    A.append(a)
                    Y.append(mu + e)
                    P.append(pl * pa / len(noise))
        return DiscreteDistribution(np.array(L), A, Y, P, delta=self.delta)

    # -------------------------------------------------------------- sampling

    def _draw(self, n, rng):
        """Level indices, treatments and outcomes; the stream behind :meth:`sample`."""
        rng = np.random.default_rng(rng)
        levels = self.level_array
        idx = rng.choice(len(self.levels), size=int(n), p=np.array(self.level_mass))
        A = (rng.random(int(n)) < self.propensity(levels)[idx]).astype(float)
        u = np.clip(rng.random(int(n)), 1e-300, None)
        means = np.column_stack([self.outcome_mean(levels, 0), self.outcome_mean(levels, 1)])
        Y = means[idx, A.astype(int)] + self.noise_sd * ndtri(u)
        return idx, A, Y

    def sample(self, n, rng):
        idx, A, Y = self._draw(n, rng)
        return Dataset(self.level_array[idx], A, Y)

    # -------------------------------------------------------------- learners

    def _distortion(self, covariates):
        L = np.asarray(covariates, dtype=float).reshape(len(covariates), -1)
        sq = np.sum(L * L, axis=1)
        grid = self.level_array
        centre = math.fsum(np.array(self.level_mass) * np.sum(grid * grid, axis=1))
        return sq - centre

    def features(self, which):
        flag = self.misspecify_propensity if which == "propensity" else self.misspecify_outcome
        if flag == "omission":
            return PolynomialFeatures(())
        return PolynomialFeatures(tuple(f"l{j + 1}" for j in range(self.d)))

    def fit_propensity(self, data):
        fit = fit_logistic(data, self.features("propensity"), delta=self.delta)
        if self.misspecify_propensity != "distortion":
            return fit
        c = self.distortion_propensity
        return FunctionPropensity(lambda L: expit(fit.linear_predictor(L) + c * self._distortion(L)), self.delta)

    def fit_outcome(self, data):
        fit = fit_outcome_linear(data, self.features("outcome"))
        if self.misspecify_outcome != "distortion":
            return fit
        c = self.distortion_outcome
        return FunctionOutcome(lambda L, a: fit.predict(L, a) + c * self._distortion(L))

    def limit_nuisance(self):
        """Probability limits ``(pi_bar, mu_bar)`` of this DGP's learners."""
        law = self.discrete_law()
        flag_pi, flag_mu = self.misspecify_propensity, self.misspecify_outcome
        if flag_pi == "omission":
            marginal = math.fsum(law.mass * law.treatment)
            pi_bar = lambda L: np.full(len(L), marginal)
        elif flag_pi == "distortion":
            c = self.distortion_propensity
            pi_bar = lambda L: expit(logit(self.propensity(L)) + c * self._distortion(L))
        else:
            pi_bar = self.propensity
        if flag_mu == "omission":
            arm_means = [math.fsum(law.mass * law.outcome * (law.treatment == a)) / math.fsum(law.mass * (law.treatment == a))
                         for a in (0, 1)]
            mu_bar = lambda L, a: np.full(len(L), arm_means[int(a)])
        elif flag_mu == "distortion":
            c = self.distortion_outcome
            mu_bar = lambda L, a: self.outcome_mean(L, a) + c * self._distortion(L)
        else:
            mu_bar = self.outcome_mean
        return pi_bar, mu_bar

    def limit_bias(self):
        """Exact bias of AIPW at the learners' limits (zero unless both are wrong)."""
        pi_bar, mu_bar = self.limit_nuisance()
        return exact_bias(self.discrete_law(), pi_bar, mu_bar, delta=self.delta)

    # -------------------------------------------------------------- synthetic nuisances

    def _unit(self, covariates):
        grid = self.level_array[:, 0]
        mean = math.fsum(np.array(self.level_mass) * grid)
        span = grid.max() - grid.min()
        L = np.asarray(covariates, dtype=float).reshape(len(covariates), -1)
        return (L[:, 0] - mean) / span if span > 0 else np.zeros(L.shape[0])

    def synthetic_nuisance(self, n):
        """Deterministic ``(pi_n, mu_n)`` at distance ``scale n^-rate`` from the truth."""
        s_pi = self.rate_scale * n ** (-self.rate_pi) if self.perturb_pi else 0.0
        s_mu = self.rate_scale * n ** (-self.rate_mu) if self.perturb_mu else 0.0
        pi_n = lambda L: self.propensity(L) + s_pi * 0.5 * self._unit(L)
        mu_n = lambda L, a: self.outcome_mean(L, a) + s_mu * self._unit(L)
        return pi_n, mu_n

    # -------------------------------------------------------------- serialisation

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, config):
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(config) - known)
        if unknown:
            raise DomainError(f"unknown DGP fields: {unknown}")
        return cls(**config)


# ---------------------------------------------------------------- estimator registry

def _est_aipw(data, spec, level, seed):
    return aipw_ate(data, NuisancePair(spec.fit_propensity(data), spec.fit_outcome(data)), level)


def _est_aipw_oracle(data, spec, level, seed):
    nuisance = NuisancePair(FunctionPropensity(spec.propensity, spec.delta), FunctionOutcome(spec.outcome_mean))
    return aipw_ate(data, nuisance, level)


def _est_crossfit(data, spec, level, seed):
    return crossfit_aipw(data, spec.fit_propensity, spec.fit_outcome, folds=5, seed=seed, level=level)


def _est_ipw_known(data, spec, level, seed):
    return ipw_report(data, FunctionPropensity(spec.propensity, spec.delta), level)


def _est_ipw_estimated(data, spec, level, seed):
    return ipw_estimated_parametric(data, spec.features("propensity"), level, delta=spec.delta)


ESTIMATORS = {
    "aipw": _est_aipw,
    "aipw_oracle": _est_aipw_oracle,
    "crossfit_aipw": _est_crossfit,
    "ipw_known": _est_ipw_known,
    "ipw_estimated": _est_ipw_estimated,
}


def resolve_estimators(estimators):
    out = {}
    for item in estimators:
        if isinstance(item, str):
            if item not in ESTIMATORS:
                raise DomainError(f"unknown estimator {item!r}; available: {sorted(ESTIMATORS)}")
            out[item] = ESTIMATORS[item]
        elif isinstance(item, tuple) and len(item) == 2 and callable(item[1]):
            out[item[0]] = item[1]
        elif callable(item):
            out[getattr(item, "__name__", f"estimator{len(out)}")] = item
        else:
            raise DomainError(f"cannot resolve estimator {item!r}")
    if not out:
        raise DomainError("no estimators given")
    return out


# ---------------------------------------------------------------- Monte Carlo

def _seed_sequence(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (list, tuple)):
        return np.random.SeedSequence([int(s) for s in seed])
    return np.random.SeedSequence(int(seed))


def _map(func, items, threads):
    if threads <= 1:
        return [func(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def _summarise(psi, se, lower, upper, truth):
    k = len(psi)
    if k == 0:
        return {"reps": 0}
    psi = np.asarray(psi)
    bias = math.fsum(psi - truth) / k
    mean = math.fsum(psi) / k
    sd = math.sqrt(math.fsum((psi - mean) ** 2) / (k - 1)) if k > 1 else 0.0
    covered = (np.asarray(lower) <= truth) & (truth <= np.asarray(upper))
    return {
        "reps": k,
        "mean": mean,
        "bias": bias,
        "sd": sd,
        "bias_mc_se": sd / math.sqrt(k),
        "mean_se": math.fsum(se) / k,
        "coverage": float(np.count_nonzero(covered)) / k,
        "mean_width": math.fsum(np.asarray(upper) - np.asarray(lower)) / k,
    }


@dataclass
class MonteCarloSummary:
    truth: float
    n: int
    reps: int
    level: float
    seed: object
    estimators: dict
    failures: list = field(default_factory=list)
    per_rep: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self, include_reps=False):
        out = {
            "truth": self.truth,
            "n": self.n,
            "reps": self.reps,
            "level": self.level,
            "seed": self.seed,
            "estimators": self.estimators,
            "failures": self.failures,
            "config": self.config,
        }
        if include_reps:
            out["per_rep"] = self.per_rep
        return out


def run_monte_carlo(spec, estimators, n, reps, seed, level=0.95, threads=1):
    """Replicate estimators over independent datasets drawn from ``spec``.

    Replication ``r`` draws its data from the ``r``-th child of
    ``SeedSequence(seed)``, so results do not depend on ``threads``.
    Estimators are names from :data:`ESTIMATORS` or callables
    ``est(data, spec, level, seed) -> report`` where the report has
    ``psi_hat``, ``se`` and ``ci``.

    Raises
    ------
    MonteCarloError
        When more than 1% of the estimator runs fail.
    """
    if reps < 1:
        raise DomainError("need at least one replication")
    ests = resolve_estimators(estimators)
    children = _seed_sequence(seed).spawn(int(reps))
    truth = spec.truth()

    def one(r):
        child = children[r]
        data = spec.sample(n, np.random.default_rng(child))
        est_seed = int(child.generate_state(1)[0])
        out = {}
        for name, est in ests.items():
            try:
                rep = est(data, spec, level, est_seed)
                out[name] = (float(rep.psi_hat), float(rep.se), float(rep.ci.lower), float(rep.ci.upper))
            except (SemicausalError, np.linalg.LinAlgError, FloatingPointError) as exc:
                out[name] = exc
        return out

    results = _map(one, range(int(reps)), threads)
    summary, failures, per_rep = {}, [], []
    for name in ests:
        cols = ([], [], [], [])
        for r, res in enumerate(results):
            value = res[name]
            if isinstance(value, Exception):
                failures.append({"rep": r, "estimator": name, "error": f"{type(value).__name__}: {value}"})
                continue
            for col, v in zip(cols, value):
                col.append(v)
            per_rep.append({"rep": r, "estimator": name, "psi_hat": value[0], "se": value[1],
                            "covered": bool(value[2] <= truth <= value[3])})
        summary[name] = _summarise(*cols, truth)
    total = len(ests) * int(reps)
    if len(failures) > MAX_FAILURE_RATE * total:
        raise MonteCarloError(f"{len(failures)} of {total} estimator runs failed; first: {failures[0]['error']}")
    per_rep.sort(key=lambda row: (row["rep"], list(ests).index(row["estimator"])))
    return MonteCarloSummary(truth, int(n), int(reps), level, seed, summary, failures, per_rep, spec.to_dict())


def efficiency_experiment(spec, n, reps, seed, threads=1):
    """Compare IPW with the known propensity against IPW with a fitted logistic model."""
    mc = run_monte_carlo(spec, ["ipw_known", "ipw_estimated"], n, reps, seed, threads=threads)
    known, estimated = mc.estimators["ipw_known"], mc.estimators["ipw_estimated"]
    var_known = known.get("sd", 0.0) ** 2
    var_est = estimated.get("sd", 0.0) ** 2
    if var_known > 0:
        ratio = var_est / var_known
    else:
        ratio = 1.0 if var_est == 0 else math.inf
    return {
        "n": int(n),
        "reps": int(reps),
        "seed": seed,
        "truth": mc.truth,
        "var_known": var_known,
        "var_estimated": var_est,
        "ratio": ratio,
        "reliable": int(reps) >= RELIABLE_REPS,
        "mean_se_known": known.get("mean_se"),
        "mean_se_estimated": estimated.get("mean_se"),
        "failures": len(mc.failures),
    }


def dr_experiment(spec, n_grid=(500, 2000, 8000), reps=500, seed=0, threads=1):
    """Monte-Carlo bias of AIPW across sample sizes under misspecification.

    With one nuisance misspecified the bias must vanish as ``n`` grows; with
    both misspecified it settles at the oracle's exact limiting bias.
    """
    wrong_pi = spec.misspecify_propensity is not None
    wrong_mu = spec.misspecify_outcome is not None
    if not (wrong_pi or wrong_mu):
        raise PreconditionError("dr_experiment needs at least one misspecified nuisance")
    limit = spec.limit_bias()
    rows = []
    for i, n in enumerate(n_grid):
        mc = run_monte_carlo(spec, ["aipw"], n, reps, [int(seed), i], threads=threads)
        s = mc.estimators["aipw"]
        rows.append({"n": int(n), "bias": s["bias"], "mc_se": s["bias_mc_se"], "sd": s["sd"],
                     "coverage": s["coverage"], "failures": len(mc.failures)})
    first, last = rows[0], rows[-1]
    out = {
        "mode": "both_wrong" if (wrong_pi and wrong_mu) else ("propensity_wrong" if wrong_pi else "outcome_wrong"),
        "reps": int(reps),
        "seed": seed,
        "limit_bias": limit,
        "rows": rows,
    }
    if wrong_pi and wrong_mu:
        out["persistent"] = abs(last["bias"]) > 4 * last["mc_se"]
        out["matches_limit"] = abs(last["bias"] - limit) <= 4 * last["mc_se"]
    else:
        out["consistent"] = abs(last["bias"]) < max(0.5 * abs(first["bias"]), 2 * last["mc_se"])
    return out


def _trend(values):
    mags = [abs(v) for v in values]
    if all(b < a for a, b in zip(mags, mags[1:])):
        return "decreasing"
    if all(b > a for a, b in zip(mags, mags[1:])):
        return "increasing"
    return "none"


def rate_experiment(spec, n_grid=(1_000, 10_000, 100_000), reps=2000, seed=0, threads=1):
    """Root-n scaled bias of AIPW with synthetic nuisances at controlled rates.

    For every replication the AIPW moment is evaluated with the synthetic
    nuisances and with the true ones on the same sample; the mean of the
    difference is an unbiased, low-variance estimate of the bias.  The plain
    bias ``psi_hat - psi_0`` is reported alongside.
    """
    law = spec.discrete_law()
    truth = spec.truth()
    rows = []
    for i, n in enumerate(n_grid):
        pi_n, mu_n = spec.synthetic_nuisance(n)
        levels = spec.level_array
        raw = pi_n(levels)
        truncated_levels = int(np.count_nonzero((raw < spec.delta) | (raw > 1 - spec.delta)))
        if truncated_levels:
            logger.warning("synthetic propensity left [delta, 1-delta] at %d levels for n=%d; truncated",
                           truncated_levels, n)
        pi_t = lambda L, f=pi_n: truncate_propensity(f(L), spec.delta)
        exact = exact_bias(law, pi_t, mu_n, delta=spec.delta)
        children = _seed_sequence([int(seed), i]).spawn(int(reps))

        # nuisances are evaluated once per covariate level and indexed per row
        tab_pi, tab_mu1, tab_mu0 = pi_t(levels), mu_n(levels, 1), mu_n(levels, 0)
        true_pi = spec.propensity(levels)
        true_mu1, true_mu0 = spec.outcome_mean(levels, 1), spec.outcome_mean(levels, 0)

        def one(r, n=n, tabs=(tab_pi, tab_mu1, tab_mu0)):
            idx, A, Y = spec._draw(n, children[r])
            p, m1, m0 = (t[idx] for t in tabs)
            est = A * (Y - m1) / p + m1 - (1 - A) * (Y - m0) / (1 - p) - m0
            p, m1, m0 = true_pi[idx], true_mu1[idx], true_mu0[idx]
            ref = A * (Y - m1) / p + m1 - (1 - A) * (Y - m0) / (1 - p) - m0
            return est.sum() / n - truth, (est - ref).sum() / n

        res = np.array(_map(one, range(int(reps)), threads))
        root = math.sqrt(n)
        plain, paired = res[:, 0], res[:, 1]
        k = len(res)
        sd = lambda v: math.sqrt(math.fsum((v - v.mean()) ** 2) / (k - 1)) if k > 1 else 0.0
        rows.append({
            "n": int(n),
            "sqrt_n_bias": root * math.fsum(paired) / k,
            "mc_se": root * sd(paired) / math.sqrt(k),
            "sqrt_n_bias_plain": root * math.fsum(plain) / k,
            "mc_se_plain": root * sd(plain) / math.sqrt(k),
            "sqrt_n_exact_bias": root * exact,
            "truncated_levels": truncated_levels,
        })
    rate_sum = spec.rate_pi + spec.rate_mu
    if not (spec.perturb_pi and spec.perturb_mu):
        expected = "zero"
    else:
        expected = "decreasing" if rate_sum > 0.5 else ("increasing" if rate_sum < 0.5 else "none")
    return {
        "rate_pi": spec.rate_pi,
        "rate_mu": spec.rate_mu,
        "scale": spec.rate_scale,
        "perturb_pi": spec.perturb_pi,
        "perturb_mu": spec.perturb_mu,
        "reps": int(reps),
        "seed": seed,
        "rows": rows,
        "trend": _trend([row["sqrt_n_bias"] for row in rows]),
        "expected_trend": expected,
    }
