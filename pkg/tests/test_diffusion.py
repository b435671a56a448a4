import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import gamma
from scipy.stats import norm

from cwstein.chain import drift_coefficient_derived
from cwstein.diffusion import (
    Provenance,
    build_critical_spec,
    build_supercritical_spec,
    critical_normalizer_closed_form,
    density_moment,
    extract_drift,
    generator_apply_limit,
    ou_spec,
    ou_variance,
    stationary_density,
    stein_identity_residual,
)
from cwstein.model import Regime, solve_m0


def test_critical_normalizer_closed_form():
    d = stationary_density(build_critical_spec())
    # density is exp(-x^4/12)/4, so 1/C_Y = (1/4) int exp(-x^4/12)
    assert 4.0 * math.exp(-d.log_C_Y) == pytest.approx(critical_normalizer_closed_form(), rel=1e-9)


def test_critical_normalizer_against_scipy_quad():
    val, _ = integrate.quad(lambda x: math.exp(-(x**4) / 12), -np.inf, np.inf, epsabs=1e-14)
    assert critical_normalizer_closed_form() == pytest.approx(val, rel=1e-12)


def test_critical_moments():
    d = stationary_density(build_critical_spec())
    # E x^2 = sqrt(12) Gamma(3/4) / Gamma(1/4)
    m2 = math.sqrt(12.0) * gamma(0.75) / gamma(0.25)
    assert density_moment(d, 2).value == pytest.approx(m2, rel=1e-10)
    assert density_moment(d, 2).value == pytest.approx(1.1708286566075292, rel=1e-10)
    # E x^4 = 3 from integration by parts against the quartic potential
    assert density_moment(d, 4).value == pytest.approx(3.0, rel=1e-10)
    for k in (1, 3, 5):
        assert abs(density_moment(d, k).value) < 1e-12


def test_unit_ou_is_standard_normal():
    d = stationary_density(ou_spec(2.0, -1.0))
    x = np.linspace(-6, 6, 121)
    assert np.max(np.abs(d.pdf(x) - norm.pdf(x))) < 1e-10
    assert density_moment(d, 2).value == pytest.approx(1.0, abs=1e-10)
    assert density_moment(d, 4).value == pytest.approx(3.0, abs=1e-10)


@pytest.mark.parametrize("a,c", [(4.0, -1.0), (4.0, -2.0), (1.0, -0.3)])
def test_ou_variance(a, c):
    d = stationary_density(ou_spec(a, c))
    assert density_moment(d, 2).value == pytest.approx(ou_variance(a, c), rel=1e-10)


def test_density_normalized():
    for spec in (build_critical_spec(), ou_spec(4.0, -1.0)):
        d = stationary_density(spec)
        assert d.expect(lambda x: np.ones_like(x)).value == pytest.approx(1.0, abs=1e-12)
        assert d.error < 1e-12


def test_non_integrable_spec_raises():
    with pytest.raises(ValueError):
        stationary_density(ou_spec(2.0, 0.0))
    with pytest.raises(ValueError):
        stationary_density(ou_spec(2.0, 0.5))


def test_ou_rejects_nonpositive_diffusion():
    with pytest.raises(ValueError):
        ou_spec(0.0, -1.0)


@pytest.mark.parametrize(
    "df,d2f",
    [
        (np.tanh, lambda x: 1.0 / np.cosh(x) ** 2),
        (np.cos, lambda x: -np.sin(x)),
        (lambda x: 1.0 / (1.0 + np.exp(-x)), lambda x: np.exp(-x) / (1.0 + np.exp(-x)) ** 2),
    ],
    ids=["tanh", "cos", "sigmoid"],
)
@pytest.mark.parametrize("which", ["critical", "ou", "beta08"])
def test_stein_identity(df, d2f, which):
    spec = {
        "critical": build_critical_spec,
        "ou": lambda: ou_spec(2.0, -1.0),
        "beta08": lambda: build_supercritical_spec(0.8, 0.1),
    }[which]()
    res = stein_identity_residual(stationary_density(spec), df, d2f)
    assert abs(res.value) < 1e-7


def test_generator_apply_limit_values():
    spec = build_critical_spec()
    x = np.array([-1.0, 0.0, 2.0])
    got = generator_apply_limit(spec, lambda x: np.ones_like(x), lambda x: np.zeros_like(x), x)
    assert np.allclose(got, -(2.0 / 3.0) * x**3)
    got = generator_apply_limit(spec, np.zeros(3), np.ones(3), x)
    assert np.allclose(got, 2.0)


def test_extract_drift_values():
    assert extract_drift(0.0, 0.0).coefficient == pytest.approx(-2.0, abs=1e-3)
    assert extract_drift(0.5, 0.0).coefficient == pytest.approx(-1.0, abs=1e-3)


@pytest.mark.parametrize("beta,h", [(0.2, 0.0), (0.8, 0.1), (0.5, -0.4)])
def test_extract_drift_matches_closed_form(beta, h):
    est = extract_drift(beta, h)
    assert est.coefficient == pytest.approx(drift_coefficient_derived(beta, h), abs=1e-8)


@pytest.mark.parametrize("beta", [0.0, 0.2, 0.5, 0.8])
def test_supercritical_variance_zero_field(beta):
    spec = build_supercritical_spec(beta, 0.0)
    var = density_moment(stationary_density(spec), 2).value
    assert var == pytest.approx(1.0 / (1.0 - beta), rel=1e-7)


def test_supercritical_spec_metadata():
    spec = build_supercritical_spec(0.8, 0.1)
    m0 = solve_m0(0.8, 0.1)
    assert spec.regime is Regime.SUPERCRITICAL
    assert spec.provenance is Provenance.EXTRACTED
    assert float(spec.a(0.0)) == pytest.approx(4.0 * (1.0 - m0))
    assert build_supercritical_spec(0.5, 0.0, "printed").provenance is Provenance.PRINTED


def test_printed_source_variance_differs():
    # the printed coefficient makes the beta=0.5 limit a unit-variance law
    spec = build_supercritical_spec(0.5, 0.0, Provenance.PRINTED)
    var = density_moment(stationary_density(spec), 2).value
    assert var == pytest.approx(1.0, rel=1e-9)
    assert abs(var - 2.0) > 0.5


def test_supercritical_spec_domain():
    with pytest.raises(ValueError):
        build_supercritical_spec(1.0, 0.0)
    with pytest.raises(ValueError):
        build_supercritical_spec(0.5, 0.0, "closed-form")


def test_moment_truncation_guard():
    d = stationary_density(ou_spec(2.0, -1.0), truncation=3.0)
    with pytest.raises(ArithmeticError):
        density_moment(d, 6)
