import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import ndtri

from semicausal.core import Dataset
from semicausal.estimators import ipw_estimated_parametric, ipw_logistic_estfun, ipw_logistic_jacobian
from semicausal.exceptions import DomainError, InsufficientDataError, PreconditionError, SingularDesignError
from semicausal.inference import (
    ConfidenceInterval,
    if_standard_error,
    normal_quantile,
    numeric_jacobian,
    sandwich_stacked,
    wald_interval,
)
from semicausal.nuisance import fit_logistic

from conftest import make_data


class TestNormalQuantile:

    @pytest.mark.parametrize("p", [1e-12, 1e-6, 0.01, 0.02425, 0.3, 0.5, 0.8, 0.975, 0.995, 1 - 1e-9])
    def test_against_ndtri(self, p):
        assert normal_quantile(p) == pytest.approx(float(ndtri(p)), rel=1e-13, abs=1e-14)

    def test_known_value(self):
        assert normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-14)

    def test_domain(self):
        with pytest.raises(DomainError):
            normal_quantile(1.0)


class TestStandardError:

    def test_zeros(self):
        assert if_standard_error(np.zeros(5)) == 0.0

    def test_pair(self):
        assert if_standard_error([1.0, -1.0]) == pytest.approx(math.sqrt(0.5), abs=1e-15)

    def test_two_pass(self):
        phi = np.random.default_rng(12).standard_normal(100)
        phi = phi - phi.mean()
        total = 0.0
        for v in phi:
            total += v * v
        assert if_standard_error(phi) == pytest.approx(math.sqrt(total / 100) / math.sqrt(100), abs=1e-14)

    def test_too_short(self):
        with pytest.raises(InsufficientDataError):
            if_standard_error([0.3])

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=50), st.floats(-10, 10))
    def test_scale_equivariance(self, values, c):
        phi = np.asarray(values)
        assert if_standard_error(c * phi) == pytest.approx(abs(c) * if_standard_error(phi), rel=1e-12, abs=1e-300)


class TestWald:

    def test_zero_se(self):
        ci = wald_interval(1.3, 0.0)
        assert ci.lower == ci.upper == 1.3

    def test_standard(self):
        ci = wald_interval(0.0, 1.0, 0.95)
        npt.assert_allclose([ci.lower, ci.upper], [-1.959964, 1.959964], atol=1e-6)

    def test_widths_increase(self):
        widths = [wald_interval(0.0, 1.0, lv).width for lv in (0.90, 0.95, 0.99)]
        assert widths[0] < widths[1] < widths[2]

    def test_bad_level(self):
        with pytest.raises(DomainError):
            wald_interval(0.0, 1.0, 1.0)

    @given(st.floats(-1e6, 1e6), st.floats(0, 1e3), st.floats(0.01, 0.99))
    def test_contains_estimate(self, psi, se, level):
        assert psi in wald_interval(psi, se, level)

    def test_interval_validation(self):
        with pytest.raises(DomainError):
            ConfidenceInterval(0.95, 1.0, 0.0)


class TestSandwich:

    def test_sample_mean(self):
        y = np.array([1.0, 4.0, -2.0, 3.5])
        data = Dataset(np.zeros(4), [0, 1, 0, 1], y)
        estfun = lambda d, th: (d.outcome - th[0])[:, None]
        infl = sandwich_stacked(data, estfun, [y.mean()])
        npt.assert_allclose(infl[:, 0], y - y.mean(), atol=1e-9)

    def test_unsolved(self):
        data = Dataset(np.zeros(3), [0, 1, 0], [1.0, 2.0, 3.0])
        with pytest.raises(PreconditionError):
            sandwich_stacked(data, lambda d, th: (d.outcome - th[0])[:, None], [0.0])

    def test_singular(self):
        data = Dataset(np.zeros(3), [0, 1, 0], [1.0, 2.0, 3.0])
        estfun = lambda d, th: np.column_stack([d.outcome - th[0], d.outcome - th[0]])
        with pytest.raises(SingularDesignError):
            sandwich_stacked(data, estfun, [2.0, 2.0])

    def test_reparameterisation(self):
        data = make_data(60, seed=3)
        y = data.outcome
        base = sandwich_stacked(data, lambda d, th: (d.outcome - th[0])[:, None], [y.mean()])
        # theta' = 2 theta with m'(z; theta') = 2 (y - theta'/2)
        scaled = sandwich_stacked(data, lambda d, th: (2 * (d.outcome - th[0] / 2))[:, None], [2 * y.mean()])
        se = if_standard_error(base[:, 0])
        assert if_standard_error(scaled[:, 0] / 2) == pytest.approx(se, rel=1e-7)

    def test_ipw_stack_analytic_vs_numeric(self, data200):
        fit = fit_logistic(data200)
        report = ipw_estimated_parametric(data200, fit=fit)
        theta = np.r_[report.psi_hat, fit.coef]
        estfun = ipw_logistic_estfun(fit.features, fit.delta)
        analytic = ipw_logistic_jacobian(fit.features, fit.delta)(data200, theta)
        numeric = numeric_jacobian(estfun, data200, theta)
        npt.assert_allclose(analytic, numeric, atol=1e-5)

    def test_ipw_stack_reproduces_corrected_influence(self, data200):
        fit = fit_logistic(data200)
        report = ipw_estimated_parametric(data200, fit=fit)
        theta = np.r_[report.psi_hat, fit.coef]
        estfun = ipw_logistic_estfun(fit.features, fit.delta)
        for mode in ("numeric", ipw_logistic_jacobian(fit.features, fit.delta)):
            infl = sandwich_stacked(data200, estfun, theta, jacobian=mode)
            npt.assert_allclose(infl[:, 0], report.influence, atol=1e-8)
