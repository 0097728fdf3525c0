import json
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from persistlab.exponents import (
    Budget,
    BudgetExceeded,
    FitError,
    Relation,
    Report,
    TheoryValue,
    capped_t_max,
    duality_scale,
    fit_exponent,
    formula_checks,
    geometric_grid,
    lower_bound_check,
    psi,
    pursuit_check,
    pursuit_floor,
    theta_from_spectrum,
    theta_pursuit_exact,
    tiling_check,
)
from persistlab.geometry import Cube, discretize
from persistlab.kernels import TensorKernel, ou_kernel, spectral_density
from persistlab.orthant import ProbEstimate, exact_brownian_sup, exact_estimate, exact_ou_negative


def _noisy(T, log_p, se):
    return (T, ProbEstimate(math.exp(log_p), log_p, se, "synthetic", 0))


# fitting --------------------------------------------------------------------


def test_fit_log_square_synthetic():
    Ts = [math.e, math.e**2, math.e**3, math.e**4]
    series = [(T, exact_estimate(math.exp(-0.5 * math.log(T) ** 2))) for T in Ts]
    fit = fit_exponent(series, "log_power", 2)
    assert fit.theta_hat == pytest.approx(0.5, abs=1e-12)
    assert fit.intercept == pytest.approx(0.0, abs=1e-10)


def test_fit_linear_synthetic():
    series = [(T, exact_estimate(7 * math.exp(-2 * T))) for T in (1.0, 2.0, 3.0, 4.0)]
    fit = fit_exponent(series, "power", 1)
    assert fit.theta_hat == pytest.approx(2.0, abs=1e-12)
    assert fit.intercept == pytest.approx(-math.log(7), abs=1e-12)


def test_fit_brownian_oracle():
    series = [(math.exp(k), exact_estimate(exact_brownian_sup(math.exp(k), 1.0))) for k in range(2, 7)]
    fit = fit_exponent(series, "log_power", 1, c=1.0)
    assert 0.45 <= fit.theta_hat <= 0.55


def test_fit_weights_follow_errors():
    # a wild point with a huge error bar barely moves the fit
    good = [_noisy(T, -0.5 * T, 0.01) for T in (1.0, 2.0, 3.0, 4.0)]
    fit = fit_exponent(good + [_noisy(5.0, -10.0, 100.0)], "power", 1)
    assert fit.theta_hat == pytest.approx(0.5, abs=1e-3)


def test_fit_ci_inflated_by_misfit():
    tight = [_noisy(T, -0.5 * T + 0.3 * (-1) ** i, 0.01) for i, T in enumerate((1.0, 2.0, 3.0, 4.0))]
    fit = fit_exponent(tight, "power", 1)
    assert fit.chi2_red > 1
    lo, hi = fit.ci_95
    assert hi - lo > 2 * 1.96 * 0.01 / math.sqrt(5)


def test_fit_needs_three_points():
    with pytest.raises(FitError, match="need >= 3 T values"):
        fit_exponent([(2.0, exact_estimate(0.5))], "power", 1)
    with pytest.raises(FitError):
        fit_exponent([(2.0, exact_estimate(0.5))] * 3, "power", 1)


def test_fit_needs_finite_log_p():
    series = [(T, exact_estimate(p)) for T, p in ((1.0, 0.5), (2.0, 0.2), (3.0, 0.0))]
    with pytest.raises(FitError):
        fit_exponent(series, "power", 1)


def test_fit_singular_design():
    # psi = T^0 is constant, so theta is not identifiable
    series = [(T, exact_estimate(p)) for T, p in ((1.0, 0.5), (2.0, 0.4), (3.0, 0.3))]
    with pytest.raises(FitError, match="singular design"):
        fit_exponent(series, "power", 0)


@settings(max_examples=50, deadline=None)
@given(
    steps=st.lists(st.floats(0.0, 2.0), min_size=4, max_size=6),
    se=st.lists(st.floats(0.001, 0.5), min_size=6, max_size=6),
)
def test_fit_nonnegative_on_monotone_series(steps, se):
    # persistence probabilities of nested regions never increase with T
    log_p = -np.cumsum(steps)
    series = [_noisy(float(j + 1), float(lp), se[j]) for j, lp in enumerate(log_p)]
    fit = fit_exponent(series, "power", 1)
    assert fit.theta_hat >= -1e-9
    assert fit.theta_hat >= -(fit.ci_95[1] - fit.ci_95[0])


def test_psi_kinds():
    assert psi(3.0, "power", 2) == pytest.approx(9.0)
    assert psi(math.e**2, "log_power", 2) == pytest.approx(4.0)
    with pytest.raises(FitError):
        psi(1.0, "cubic")


def test_overlap():
    a = fit_exponent([_noisy(T, -0.5 * T, 0.05) for T in (1.0, 2.0, 3.0)], "power", 1)
    b = fit_exponent([_noisy(T, -1.0 * T, 0.05) for T in (1.0, 2.0, 3.0)], "power", 1)
    assert not a.overlaps(b)
    assert a.overlaps(b, 1.0, 2.0)


# grids -----------------------------------------------------------------------


def test_geometric_grid():
    g = geometric_grid(6.0, 4)
    assert g[-1] == 6.0 and len(g) == 4
    assert np.allclose(np.diff(np.log(g)), math.log(2) / 3)


def test_capped_t_max():
    T = capped_t_max(Cube(1.0, 2), 0.25, 144)
    assert discretize(Cube(T, 2), 0.25).count == 144


# closed forms -----------------------------------------------------------------


def test_gamma_ratio_values():
    assert theta_pursuit_exact(0.5).value == pytest.approx(0.25, abs=1e-12)
    v = theta_pursuit_exact(0.25).value
    assert v == pytest.approx(math.gamma(1.25) / (2 * math.gamma(0.5) * math.gamma(0.75)), rel=1e-12)
    assert v >= 0.125


@given(st.floats(0.01, 0.99))
def test_gamma_ratio_above_floor(h):
    assert theta_pursuit_exact(h).value >= pursuit_floor(h)


@pytest.mark.parametrize("h", [0.0, 1.0])
def test_gamma_ratio_rejects_endpoints(h):
    with pytest.raises(ValueError):
        theta_pursuit_exact(h)


def test_spectral_values():
    assert theta_from_spectrum(2 / math.pi).value == pytest.approx(0.25, abs=1e-12)
    assert theta_from_spectrum(1 / (2 * math.pi)).value == pytest.approx(1.0, abs=1e-12)
    f0 = spectral_density(ou_kernel()).f_zero
    assert theta_from_spectrum(f0).value == pytest.approx(0.25, abs=1e-4)
    with pytest.raises(ValueError):
        theta_from_spectrum(0.0)


def test_formula_cross_consistency():
    assert abs(theta_pursuit_exact(0.5).value - theta_from_spectrum(2 / math.pi).value) <= 1e-12


def test_lower_bound():
    lb = lower_bound_check(0.5, 0.5, 2 / math.pi)
    assert lb.bound == pytest.approx(0.5, abs=1e-12) and lb.hurst_min == 0.5
    assert lower_bound_check(0.3, 0.3, 1.0).factor == pytest.approx(2.0)
    assert lower_bound_check(0.25, 0.75, 1.0).factor == pytest.approx(8 / 3, abs=1e-12)
    assert lower_bound_check(0.25, 0.75, 1.0).hurst_min is None


def test_duality_scale():
    assert duality_scale(0.4, 0.4) == pytest.approx(math.sqrt(2))
    assert duality_scale(0.25, 0.75) == pytest.approx(1.6330, abs=1e-4)


def test_theory_value_nonnegative():
    with pytest.raises(ValueError):
        TheoryValue("x", -0.1, "test")


# relations -------------------------------------------------------------------


def test_d1_scaling_with_ou_oracle():
    # theta([0, 2T]) / 2 against theta([0, T]) for the exact OU series
    Ts = [6.0, 8.0, 10.0, 12.0]
    f1 = fit_exponent([(T, exact_estimate(exact_ou_negative(T))) for T in Ts], "power", 1)
    f2 = fit_exponent([(T, exact_estimate(exact_ou_negative(2 * T))) for T in Ts], "power", 1)
    assert f1.theta_hat == pytest.approx(0.5, abs=0.01)
    assert f2.theta_hat / 2 == pytest.approx(0.5, abs=0.01)
    # exact series have zero-width intervals, so compare the points directly
    assert abs(f2.theta_hat / 2 - f1.theta_hat) <= 1e-3


def test_formula_suite_passes():
    rels = formula_checks()
    assert all(r.verdict for r in rels)
    assert len(rels) == 3 + 9 + 1


def test_tiling_consistency_quick():
    K = TensorKernel((ou_kernel(), ou_kernel()))
    rels = tiling_check(K, (0.5, 0.5), Budget.for_tier("quick", seed=3))
    assert all(r.verdict for r in rels), [r.to_dict() for r in rels]


def test_pursuit_bound_ordering():
    b = Budget.for_tier("quick", seed=4)
    (rel,) = pursuit_check(b, n=20_000, T_values=[math.e**1.0, math.e**1.5, math.e**2.0])
    fit = rel.details["fit"]
    assert rel.verdict
    assert fit["theta_hat"] + 2 * fit["se"] >= pursuit_floor(0.5)


# budgets and reports ---------------------------------------------------------


def test_budget_tiers():
    q, f = Budget.for_tier("quick"), Budget.for_tier("full")
    assert q.seconds <= 120 and f.seconds <= 7200
    with pytest.raises(ValueError):
        Budget.for_tier("huge")


def test_budget_exceeded():
    b = Budget.for_tier("quick")
    b.started = time.monotonic() - 1000
    with pytest.raises(BudgetExceeded):
        b.check()


def test_report_serialization():
    rels = [
        Relation("a", 0.25, 0.26, (0.2, 0.3), True, {"x": np.float64(1.5)}),
        Relation("b", None, 0.1, None, False),
    ]
    rep = Report("demo", "quick", rels)
    assert not rep.passed
    doc = json.loads(rep.to_json())
    assert doc["relations"][0]["details"]["x"] == 1.5
    assert doc["relations"][0]["ci"] == [0.2, 0.3]
    text = rep.to_text()
    assert "FAIL" in text.splitlines()[-1] and "0.26" in text
    partial = Report("demo", "quick", rels[:1], partial=True, error="budget")
    assert not partial.passed and "PARTIAL" in partial.to_text()
