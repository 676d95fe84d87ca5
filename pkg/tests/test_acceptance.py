"""Acceptance criteria, one test each, at full size and stated tolerances.

Every test prints a single ``[PASS]``/``[FAIL]`` line with its key numbers
before asserting.  The Monte-Carlo criteria take about two minutes in total
on one core.
"""

import hashlib
import subprocess
import sys
import time

import numpy as np
import pytest

from semicausal import cli
from semicausal.core import DiscreteDistribution, exact_mean
from semicausal.estimators import ipw_estimated_parametric, ipw_logistic_estfun, ipw_logistic_jacobian
from semicausal.inference import numeric_jacobian, sandwich_stacked
from semicausal.nuisance import fit_logistic
from semicausal.oracle import (
    check_eif,
    efficient_influence_function,
    exact_bias,
    ipw_influence_function,
    known_propensity_perturbation,
    level_function,
    level_outcome_function,
    product_bound_check,
    random_distribution,
    random_perturbation,
)
from semicausal.simulation import DGPSpec, dr_experiment, efficiency_experiment, rate_experiment, run_monte_carlo


@pytest.fixture
def verdict(capsys):
    def emit(number, title, passed, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} | {detail}")
        return passed

    return emit


def _wrong_pi(base, rng):
    return level_function(base, rng.uniform(0.05, 0.95, size=base.levels.shape[0]))


def _wrong_mu(base, rng):
    return level_outcome_function(base, rng.normal(scale=2.0, size=(base.levels.shape[0], 2)))


def test_01_eif_pathwise_identity(verdict):
    start = time.perf_counter()
    gaps, mean_ok = [], True
    for b in range(5):
        base = random_distribution(100 + b, n_levels=2, n_outcomes=3)
        rng = np.random.default_rng(200 + b)
        gs = [random_perturbation(base, rng) for _ in range(10)]
        report = check_eif(base, efficient_influence_function(base), gs, tol=1e-6)
        gaps.extend(r["gap"] for r in report.records)
        mean_ok &= report.mean_ok
    elapsed = time.perf_counter() - start
    passed = max(gaps) <= 1e-6 and mean_ok and len(gaps) == 50 and elapsed < 5
    verdict(1, "EIF pathwise identity", passed, f"5 bases x 10 g, max gap {max(gaps):.2e}, {elapsed:.2f}s")
    assert passed


def test_02_exact_double_robustness(verdict):
    start = time.perf_counter()
    base = random_distribution(7, n_levels=2, n_outcomes=3)
    rng = np.random.default_rng(8)
    worst_mu = max(abs(exact_bias(base, base.propensity, _wrong_mu(base, rng))) for _ in range(50))
    worst_pi = max(abs(exact_bias(base, _wrong_pi(base, rng), base.outcome_regression)) for _ in range(50))
    elapsed = time.perf_counter() - start
    passed = worst_mu <= 1e-12 and worst_pi <= 1e-12 and elapsed < 1
    verdict(2, "exact double robustness", passed,
            f"max |bias| wrong mu {worst_mu:.1e}, wrong pi {worst_pi:.1e}, {elapsed:.3f}s")
    assert passed


def test_03_product_bound(verdict):
    start = time.perf_counter()
    base = random_distribution(7, n_levels=2, n_outcomes=3)
    rng = np.random.default_rng(9)
    checks = [product_bound_check(base, _wrong_pi(base, rng), _wrong_mu(base, rng)) for _ in range(100)]
    elapsed = time.perf_counter() - start
    tightest = max(c.lhs / c.rhs for c in checks)
    passed = all(c.passed for c in checks) and elapsed < 1
    verdict(3, "product bound", passed, f"100 pairs, max lhs/rhs {tightest:.3f}, {elapsed:.3f}s")
    assert passed


def test_04_coverage(verdict):
    start = time.perf_counter()
    mc = run_monte_carlo(DGPSpec(), ["aipw"], n=500, reps=1000, seed=4, level=0.95, threads=1)
    elapsed = time.perf_counter() - start
    cov = mc.estimators["aipw"]["coverage"]
    passed = 0.93 <= cov <= 0.97 and elapsed < 120
    verdict(4, "AIPW coverage", passed, f"coverage {cov:.3f} over 1000 reps at n=500, {elapsed:.1f}s")
    assert passed


def test_05_estimated_propensity_efficiency(verdict):
    start = time.perf_counter()
    out = efficiency_experiment(DGPSpec(), n=1000, reps=2000, seed=5)
    elapsed = time.perf_counter() - start
    passed = out["var_estimated"] <= 1.05 * out["var_known"] and elapsed < 180
    verdict(5, "estimated-propensity efficiency", passed,
            f"var estimated {out['var_estimated']:.5f} vs known {out['var_known']:.5f} "
            f"(ratio {out['ratio']:.3f}), {elapsed:.1f}s")
    assert passed


def test_06_double_robust_trend(verdict):
    start = time.perf_counter()
    lines, passed = [], True
    for label, kw in [("pi correct, mu distorted", {"misspecify_outcome": "distortion"}),
                      ("pi distorted, mu correct", {"misspecify_propensity": "distortion"})]:
        out = dr_experiment(DGPSpec(**kw), n_grid=(500, 2000, 8000), reps=500, seed=6)
        first, last = out["rows"][0], out["rows"][-1]
        ok = abs(last["bias"]) < max(0.5 * abs(first["bias"]), 2 * last["mc_se"])
        passed &= ok and out["consistent"]
        lines.append(f"{label}: |bias| {abs(first['bias']):.4f} -> {abs(last['bias']):.4f} "
                     f"(2 MC SE {2 * last['mc_se']:.4f})")
    both = DGPSpec(misspecify_propensity="distortion", misspecify_outcome="distortion")
    out = dr_experiment(both, n_grid=(500, 2000, 8000), reps=500, seed=6)
    last = out["rows"][-1]
    oracle = exact_bias(both.discrete_law(), *both.limit_nuisance())
    persistent = abs(last["bias"]) > 4 * last["mc_se"]
    matches = abs(last["bias"] - oracle) <= 4 * last["mc_se"]
    passed &= persistent and matches and out["persistent"] and out["matches_limit"]
    elapsed = time.perf_counter() - start
    passed &= elapsed < 300
    lines.append(f"both distorted: bias {last['bias']:.4f} vs oracle {oracle:.4f} (4 MC SE {4 * last['mc_se']:.4f})")
    verdict(6, "double-robust consistency trend", passed, "; ".join(lines) + f", {elapsed:.1f}s")
    assert passed


def test_07_rate_condition(verdict):
    start = time.perf_counter()
    fast = rate_experiment(DGPSpec(rate_pi=0.3, rate_mu=0.3), n_grid=(1_000, 10_000, 100_000), reps=2000, seed=7)
    slow = rate_experiment(DGPSpec(rate_pi=0.15, rate_mu=0.15), n_grid=(1_000, 10_000, 100_000), reps=2000, seed=7)
    elapsed = time.perf_counter() - start
    a = [abs(r["sqrt_n_bias"]) for r in fast["rows"]]
    b = [abs(r["sqrt_n_bias"]) for r in slow["rows"]]
    passed = a[0] > a[1] > a[2] and b[0] < b[1] < b[2] and elapsed < 300
    fmt = lambda v: "/".join(f"{x:.3f}" for x in v)
    verdict(7, "rate condition", passed, f"|sqrt(n) bias| (0.3,0.3): {fmt(a)}; (0.15,0.15): {fmt(b)}, {elapsed:.1f}s")
    assert passed


def test_08_cross_path_agreement(verdict):
    start = time.perf_counter()
    data = DGPSpec().sample(1000, np.random.default_rng(8))
    fit = fit_logistic(data)
    report = ipw_estimated_parametric(data, fit=fit)
    theta = np.r_[report.psi_hat, fit.coef]
    estfun = ipw_logistic_estfun(fit.features, fit.delta)
    jac_fn = ipw_logistic_jacobian(fit.features, fit.delta)
    sandwich = sandwich_stacked(data, estfun, theta, jacobian=jac_fn)[:, 0]
    infl_gap = float(np.max(np.abs(sandwich - report.influence)))
    jac_gap = float(np.max(np.abs(jac_fn(data, theta) - numeric_jacobian(estfun, data, theta))))
    elapsed = time.perf_counter() - start
    passed = infl_gap <= 1e-8 and jac_gap <= 1e-5 and elapsed < 1
    verdict(8, "cross-path agreement", passed,
            f"influence gap {infl_gap:.1e}, Jacobian gap {jac_gap:.1e}, {elapsed:.3f}s")
    assert passed


def _test_bases():
    bases = [random_distribution(300 + s, n_levels=2, n_outcomes=3) for s in range(10)]
    bases.append(DiscreteDistribution.from_json(cli.example_path("example_distribution.json")))
    bases.append(DGPSpec().discrete_law())
    return bases


def test_09_efficiency_ordering(verdict):
    start = time.perf_counter()
    checked, strict, ok = 0, 0, True
    for base in _test_bases():
        mu = base.level_outcome_mean[base.level_mass > 0]
        if np.ptp(mu[:, 0]) == 0 and np.ptp(mu[:, 1]) == 0:
            continue
        eif, ipw = efficient_influence_function(base), ipw_influence_function(base)
        var_eif = exact_mean(lambda L, A, Y: eif(L, A, Y) ** 2, base)
        var_ipw = exact_mean(lambda L, A, Y: ipw(L, A, Y) ** 2, base)
        # both are influence functions of the target along known-propensity scores
        g = known_propensity_perturbation(base, random_perturbation(base, 0))
        ok &= check_eif(base, ipw, [g]).passed
        ok &= var_eif <= var_ipw + 1e-12
        strict += var_eif < var_ipw - 1e-9
        checked += 1
    elapsed = time.perf_counter() - start
    passed = ok and strict >= 1 and checked >= 1 and elapsed < 1
    verdict(9, "efficiency ordering on the oracle", passed,
            f"{checked} bases with non-constant mu, strict on {strict}, {elapsed:.3f}s")
    assert passed


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_10_cli_determinism(verdict, tmp_path, monkeypatch):
    monkeypatch.delenv(cli.SEED_ENV, raising=False)
    data = tmp_path / "d.csv"
    DGPSpec().sample(400, np.random.default_rng(10)).to_csv(data)
    config = cli.example_path("example_config.json")
    runs = {
        "estimate": lambda out, t: ["estimate", "--data", data, "--config", config, "--seed", 3, "--threads", t, "--out", out],
        "simulate": lambda out, t: ["simulate", "--n", 300, "--reps", 60, "--estimators", "aipw,crossfit_aipw,ipw_known",
                                    "--seed", 3, "--threads", t, "--out", out, "--per-rep", f"{out}.csv"],
        "eif-check": lambda out, t: ["eif-check", "--seed", 3, "--threads", t, "--out", out],
        "rates": lambda out, t: ["rates", "--n-grid", "500,5000", "--reps", 30, "--seed", 3, "--threads", t, "--out", out],
    }
    results = {}
    for name, argv in runs.items():
        digests = []
        for i, threads in enumerate((1, 1, 4)):
            out = tmp_path / f"{name}-{i}.json"
            assert cli.main([str(a) for a in argv(out, threads)]) == 0
            digest = _digest(out)
            if name == "simulate":
                digest += _digest(tmp_path / f"{name}-{i}.json.csv")
            digests.append(digest)
        results[name] = len(set(digests)) == 1
    # the installed entry point, in a fresh interpreter
    outs = []
    for threads in (1, 4):
        out = tmp_path / f"sub-{threads}.json"
        proc = subprocess.run([sys.executable, "-m", "semicausal", "simulate", "--n", "200", "--reps", "20",
                               "--seed", "11", "--threads", str(threads), "--out", str(out)],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append(_digest(out))
    results["python -m semicausal"] = outs[0] == outs[1]
    passed = all(results.values())
    verdict(10, "CLI determinism", passed,
            ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in results.items()) + " (threads 1, 1, 4)")
    assert passed
