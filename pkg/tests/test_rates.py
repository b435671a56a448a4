import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwstein.model import ModelParams, Regime
from cwstein.rates import (
    MIN_FIT_POINTS,
    binomial_gaussian_check,
    delta_curve,
    fit_rate,
    generator_gap,
    lattice_expectation,
    limit_spec,
    run_experiment,
    variance_crosscheck,
)
from cwstein.stein import solve_stein
from cwstein.testfns import FAMILY, clipped_identity, constant, cos_fn, identity, smoothed_indicator, tanh_fn

NS = [2**j for j in range(8, 15)]


def test_fit_exact_power_law():
    ns = np.array(NS, dtype=float)
    fit = fit_rate(ns, 3.0 * ns**-0.5, 0.5)
    assert fit.fitted
    assert fit.slope == pytest.approx(-0.5, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12)
    assert max(fit.scaled) - min(fit.scaled) < 1e-12


@settings(max_examples=40, deadline=None)
@given(c=st.floats(1e-3, 1e3), r=st.floats(0.05, 2.0))
def test_fit_recovers_any_power(c, r):
    ns = np.array(NS, dtype=float)
    fit = fit_rate(ns, c * ns**-r, r)
    assert fit.slope == pytest.approx(-r, abs=1e-9)
    assert fit.band[0] <= fit.slope <= fit.band[1]


def test_fit_log_corrected_critical_rate():
    ns = np.array([4**j for j in range(4, 10)], dtype=float)
    fit = fit_rate(ns, 3.0 * ns**-0.25 * (1 + 1 / np.log(ns)), 0.25)
    assert -0.35 < fit.slope < -0.15


def test_fit_needs_four_points():
    fit = fit_rate([10, 20, 40], [0.1, 0.05, 0.025], 0.5)
    assert not fit.fitted and math.isnan(fit.slope)
    assert str(MIN_FIT_POINTS) in fit.note


def test_fit_excludes_zeros():
    ns = NS[:6]
    d = [n**-0.5 for n in ns]
    d[2] = 0.0
    fit = fit_rate(ns, d, 0.5)
    assert fit.fitted and fit.excluded == (ns[2],)
    assert fit.slope == pytest.approx(-0.5, abs=1e-12)
    assert "excluded" in fit.note


def test_fit_input_validation():
    with pytest.raises(ValueError):
        fit_rate([20, 10, 40, 80], [1, 1, 1, 1], 0.5)
    with pytest.raises(ValueError):
        fit_rate([10, 20, 40, 80], [1, -1, 1, 1], 0.5)


def test_beta0_cos_closed_form():
    # sum of n Rademacher spins: E cos(S/sqrt n) = cos(1/sqrt n)^n, limit exp(-1/2)
    for pt in delta_curve(0.0, 0.0, [64, 256, 4096], cos_fn()):
        x = 1 / math.sqrt(pt.n)
        exact = math.exp(pt.n * math.log1p(-2 * math.sin(x / 2) ** 2))
        assert pt.E_pi == pytest.approx(exact, abs=1e-13)
        assert pt.E_rho == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_lattice_expectation_odd_function_vanishes():
    for beta in (0.0, 0.5, 1.0):
        assert abs(lattice_expectation(ModelParams(1000, beta, 0.0), tanh_fn())) < 1e-15


def test_constant_and_odd_delta_zero():
    for pt in delta_curve(0.5, 0.0, NS[:3], constant()):
        assert pt.delta < 1e-11
    for pt in delta_curve(0.2, 0.0, NS[:3], tanh_fn()):
        assert pt.delta < 1e-11


def test_odd_function_gives_no_fit():
    exp = run_experiment(0.2, 0.0, NS, [tanh_fn()])
    assert not exp.curves[0].fit.fitted


def test_delta_rejects_unbounded():
    with pytest.raises(ValueError):
        delta_curve(0.5, 0.0, NS[:2], identity())


@pytest.mark.parametrize("beta,h,fn,n", [(0.5, 0.0, clipped_identity, 4096), (0.8, 0.1, tanh_fn, 1024),
                                         (1.0, 0.0, cos_fn, 1024), (0.5, 0.0, smoothed_indicator, 1024)])
def test_generator_gap_closes(beta, h, fn, n):
    sol = solve_stein(limit_spec(beta, h), fn())
    g = generator_gap(beta, h, n, sol)
    assert g.closed, (g.closure_error, g.tolerance)
    assert g.decomposition_error < 1e-12
    assert g.tolerance < 1e-5


def test_generator_gap_clip_example():
    sol = solve_stein(limit_spec(0.5, 0.0), clipped_identity())
    g = generator_gap(0.5, 0.0, 4096, sol)
    assert g.closure_error < 1e-5


def test_generator_gap_tracks_delta():
    sol = solve_stein(limit_spec(0.5, 0.0), cos_fn())
    gaps = [generator_gap(0.5, 0.0, n, sol) for n in (256, 1024, 4096)]
    for g in gaps:
        assert abs(g.signed_delta) > 100 * g.tolerance
    assert abs(gaps[-1].gap) < abs(gaps[0].gap)


def test_run_experiment_thread_determinism():
    fns = [FAMILY[k]() for k in ("clip", "tanh", "cos", "sigmoid")]
    a = run_experiment(0.5, 0.0, NS[:5], fns, threads=1)
    b = run_experiment(0.5, 0.0, NS[:5], fns, threads=4)
    assert [c.fn for c in b.curves] == ["clip", "tanh", "cos", "sigmoid"]
    for ca, cb in zip(a.curves, b.curves):
        assert [p.delta for p in ca.points] == [p.delta for p in cb.points]
        assert ca.fit == cb.fit


def test_run_experiment_rows():
    exp = run_experiment(0.5, 0.0, NS[:4], [cos_fn()], gap_ns=(NS[0],))
    rows = exp.curves[0].rows()
    assert [r["n"] for r in rows] == NS[:4]
    assert math.isfinite(rows[0]["generator_gap"]) and math.isnan(rows[1]["generator_gap"])
    assert exp.regime is Regime.SUPERCRITICAL and exp.rate == 0.5


def test_run_experiment_rejects_unsorted_grid():
    with pytest.raises(ValueError):
        run_experiment(0.5, 0.0, [512, 256, 1024, 2048], [cos_fn()])


@pytest.mark.parametrize("beta", [0.0, 0.2, 0.5, 0.8])
def test_variance_crosscheck(beta):
    chk = variance_crosscheck(beta)
    assert chk["passed"]
    assert chk["rel_err_target"] < 1e-2 and chk["abs_err_ou"] < 1e-3


def test_binomial_gaussian_check():
    chk = binomial_gaussian_check(cos_fn(), NS[:5])
    assert chk["E_normal"] == pytest.approx(math.exp(-0.5), abs=1e-14)
    assert chk["max_pipeline_vs_direct"] < 1e-12
    assert chk["scaled_bounded"]


def test_supercritical_rate_example():
    exp = run_experiment(0.5, 0.0, NS + [2**15, 2**16], [cos_fn()])
    fit = exp.curves[0].fit
    assert fit.slope <= -0.45
    assert fit.argmax_n == NS[0]
