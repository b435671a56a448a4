"""Limiting one-dimensional diffusions ``G f = a f''/2 + b f'`` and their stationary laws."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from ._quad import CellGrid
from .chain import drift_coefficient_printed, drift_limit_estimate
from .model import Regime, solve_m0


class Provenance(enum.Enum):
    PRINTED = "printed"
    EXTRACTED = "extracted"
    ANALYTIC = "closed-form"


@dataclass(frozen=True)
class DiffusionSpec:
    """Coefficients of the generator, with ``potential(x) = int_0^x 2b/a``."""

    a: Callable
    b: Callable
    a_prime: Callable
    b_prime: Callable
    potential: Callable
    regime: Optional[Regime]
    provenance: Provenance
    label: str = ""

    def log_weight(self, x):
        """Log of the unnormalized stationary density ``exp(potential)/a``."""
        x = np.asarray(x, dtype=float)
        return self.potential(x) - np.log(self.a(x))

    def two_b_over_a(self, x):
        x = np.asarray(x, dtype=float)
        return 2.0 * self.b(x) / self.a(x)


def _const(c):
    return lambda x: np.full_like(np.asarray(x, dtype=float), c)


def ou_spec(a: float, c: float, regime: Optional[Regime] = None,
            provenance: Provenance = Provenance.ANALYTIC, label: str = "") -> DiffusionSpec:
    """Constant diffusion ``a`` and linear drift ``b(x) = c x`` (``c < 0``)."""
    if a <= 0:
        raise ValueError("diffusion coefficient must be positive")
    return DiffusionSpec(
        a=_const(a),
        b=lambda x: c * np.asarray(x, dtype=float),
        a_prime=_const(0.0),
        b_prime=_const(c),
        potential=lambda x: (c / a) * np.asarray(x, dtype=float) ** 2,
        regime=regime,
        provenance=provenance,
        label=label or f"OU(a={a:g}, c={c:g})",
    )


def build_critical_spec() -> DiffusionSpec:
    """``a = 4``, ``b = -(2/3) x^3``; stationary density proportional to ``exp(-x^4/12)``."""
    return DiffusionSpec(
        a=_const(4.0),
        b=lambda x: -(2.0 / 3.0) * np.asarray(x, dtype=float) ** 3,
        a_prime=_const(0.0),
        b_prime=lambda x: -2.0 * np.asarray(x, dtype=float) ** 2,
        potential=lambda x: -np.asarray(x, dtype=float) ** 4 / 12.0,
        regime=Regime.CRITICAL,
        provenance=Provenance.PRINTED,
        label="critical quartic",
    )


@dataclass(frozen=True)
class DriftEstimate:
    coefficient: float
    error: float
    eta_probe: float
    n_grid: tuple


def extract_drift(
    beta: float,
    h: float,
    eta_probe: float = 1.0,
    n_grid: Sequence[int] = tuple(4**j for j in range(6, 13)),
    tol: float = 1e-8,
) -> DriftEstimate:
    """Linear drift coefficient of the chain, extrapolated in ``n``.

    Raises ``ArithmeticError`` when the Richardson table has not settled to
    ``tol``.
    """
    coef, err = drift_limit_estimate(beta, h, eta_probe, n_grid)
    if not (math.isfinite(coef) and err < tol):
        raise ArithmeticError(f"drift extrapolation did not converge (estimate {coef}, error {err:.3g})")
    return DriftEstimate(coef, err, eta_probe, tuple(n_grid))


def build_supercritical_spec(beta: float, h: float, source: str | Provenance = Provenance.EXTRACTED) -> DiffusionSpec:
    """OU limit of the supercritical chain.

    ``a`` is four times the zeroth-order term of ``p_plus + p_minus``; the
    drift slope is either the extrapolated one or the printed coefficient.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError("supercritical spec requires 0 <= beta < 1")
    source = Provenance(source)
    m0 = solve_m0(beta, h)
    if source is Provenance.EXTRACTED:
        a = 4.0 * (1.0 - abs(m0))
        c = extract_drift(beta, h).coefficient
    elif source is Provenance.PRINTED:
        a = 4.0 * (1.0 - m0)
        c = drift_coefficient_printed(beta, h)
    else:
        raise ValueError(f"unsupported source {source}")
    return ou_spec(a, c, Regime.SUPERCRITICAL, source, f"supercritical beta={beta:g} h={h:g} ({source.value})")


def ou_variance(spec_a: float, c: float) -> float:
    return spec_a / (2.0 * abs(c))


@dataclass(frozen=True)
class QuadResult:
    value: float
    error: float

    def __float__(self):
        return self.value


@dataclass(frozen=True)
class StationaryDensity:
    spec: DiffusionSpec
    grid: np.ndarray  # cell edges
    log_density: np.ndarray  # normalized, at the edges
    log_C_Y: float
    rule: str
    truncation: float
    error: float
    cells: CellGrid

    def logpdf(self, x):
        return self.log_C_Y + self.spec.log_weight(x)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def expect(self, fn: Callable) -> QuadResult:
        """``E fn(Y)`` by the cell rule, with a half-resolution error estimate."""
        return _expect(self, fn)


def _truncation_radius(spec: DiffusionSpec, drop: float, start: float = 1.0) -> float:
    peak = max(float(spec.log_weight(0.0)), float(np.max(spec.log_weight(np.linspace(-start, start, 201)))))
    r = start
    while True:
        lw = spec.log_weight(np.array([-r, r]))
        if np.all(peak - lw > drop):
            return r
        r *= 1.25
        if r > 1e6:
            raise ValueError(f"{spec.label}: stationary density is not integrable (no tail decay)")


def stationary_density(
    spec: DiffusionSpec,
    truncation: Optional[float] = None,
    tol: float = 1e-12,
    dx: float = 1.0 / 32,
    q: int = 8,
) -> StationaryDensity:
    """Normalize ``exp(potential)/a`` by cell-wise Gauss-Legendre quadrature.

    Without an explicit ``truncation`` the radius is where the log density
    has dropped ``30 - log(tol)`` below its peak, so the neglected mass is far
    under ``tol/10``.
    """
    if truncation is None:
        truncation = _truncation_radius(spec, 30.0 - math.log(tol))
    cells = CellGrid.uniform(-truncation, truncation, dx, q)
    log_z = _log_integral(spec, cells)
    coarse = CellGrid.uniform(-truncation, truncation, 2 * dx, q)
    err = abs(math.expm1(_log_integral(spec, coarse) - log_z))
    if not math.isfinite(log_z):
        raise ValueError(f"{spec.label}: normalizer is not finite")
    edges = cells.edges
    return StationaryDensity(
        spec=spec,
        grid=edges,
        log_density=spec.log_weight(edges) - log_z,
        log_C_Y=-log_z,
        rule=f"composite Gauss-Legendre q={q}, dx={cells.dx:g}",
        truncation=float(edges[-1]),
        error=err,
        cells=cells,
    )


def _log_integral(spec: DiffusionSpec, cells: CellGrid) -> float:
    lw = spec.log_weight(cells.nodes)
    return float(logsumexp(lw, b=cells.weights))


def _expect(density: StationaryDensity, fn: Callable) -> QuadResult:
    def at(cells):
        x = cells.nodes
        w = cells.weights * np.exp(density.spec.log_weight(x) + density.log_C_Y)
        return float(np.sum(w * np.asarray(fn(x), dtype=float)))

    fine = at(density.cells)
    coarse_cells = CellGrid(density.cells.edges[::2], density.cells.q)
    return QuadResult(fine, abs(fine - at(coarse_cells)))


def density_moment(density: StationaryDensity, k: int, tol: float = 1e-10) -> QuadResult:
    """``E Y^k``; raises when the integrand has not decayed at the truncation radius."""
    if k < 0:
        raise ValueError("k must be >= 0")
    R = density.truncation
    edge = float(np.max(np.abs(np.array([-R, R])) ** k * density.pdf(np.array([-R, R]))))
    res = density.expect(lambda x: x**k)
    if edge * R > tol * max(1.0, abs(res.value)):
        raise ArithmeticError(f"moment {k} did not converge (tail integrand {edge:.3g} at R={R:g})")
    return res


def generator_apply_limit(spec: DiffusionSpec, df, d2f, x):
    """``a(x) f''(x)/2 + b(x) f'(x)``; ``df``/``d2f`` are callables or values at ``x``."""
    x = np.asarray(x, dtype=float)
    fp = df(x) if callable(df) else np.asarray(df, dtype=float)
    fpp = d2f(x) if callable(d2f) else np.asarray(d2f, dtype=float)
    return 0.5 * spec.a(x) * fpp + spec.b(x) * fp


def stein_identity_residual(density: StationaryDensity, df: Callable, d2f: Callable) -> QuadResult:
    """``E[G f(Y)]``, which vanishes for smooth ``f`` with bounded derivatives."""
    return density.expect(lambda x: generator_apply_limit(density.spec, df, d2f, x))


def critical_normalizer_closed_form() -> float:
    """``int exp(-x^4/12) dx = 2 * 12^(1/4) * Gamma(5/4)``."""
    return 2.0 * 12.0**0.25 * math.gamma(1.25)


PRINTED_SUPERCRITICAL_GENERATOR = (
    "G f = -(1 - m0) beta x [2 beta - (1 + eta^2 beta)/(1 + m0)] f'(x) + 2 (1 - m0) f''(x)"
)
