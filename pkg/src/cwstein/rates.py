"""Approximation-rate experiments: exact ``Delta(n)``, generator gaps and slope fits."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .chain import mh_rate_arrays, richardson, scaling_scheme
from .diffusion import (
    DiffusionSpec,
    Provenance,
    StationaryDensity,
    build_critical_spec,
    build_supercritical_spec,
    ou_variance,
    stationary_density,
)
from .model import ModelParams, Regime, exact_dist, expect, solve_m0
from .stein import GridConfig, SteinSolution, solve_stein
from .testfns import TestFunction

# relative to ||h||_inf; below this a Delta is treated as an exact zero
# (the limit-density quadrature alone leaves ~1e-13)
ZERO_DELTA = 1e-11
ROUNDING_FLOOR = 1e-12
LATTICE_MASS_CUTOFF = 1e-16


@lru_cache(maxsize=None)
def limit_spec(beta: float, h: float, source: str = "extracted") -> DiffusionSpec:
    regime = Regime.classify(beta, h)
    if regime is Regime.CRITICAL:
        return build_critical_spec()
    return build_supercritical_spec(beta, h, Provenance(source))


@lru_cache(maxsize=None)
def limit_density(beta: float, h: float, source: str = "extracted") -> StationaryDensity:
    return stationary_density(limit_spec(beta, h, source))


def _lattice_eta(params: ModelParams, regime: Regime):
    scheme = scaling_scheme(params, regime)
    return scheme, scheme.eta(np.arange(params.n + 1))


def lattice_expectation(params: ModelParams, h_fn: TestFunction) -> float:
    """``E_pi h(eta)`` by exact summation over the magnetization law."""
    regime = Regime.classify(params.beta, params.h)
    dist = exact_dist(params)
    m0 = solve_m0(params.beta, params.h)
    scale = params.n**regime.gamma
    return expect(dist, lambda m: h_fn(scale * (m - m0)))


@dataclass(frozen=True)
class DeltaPoint:
    n: int
    E_pi: float
    E_rho: float

    @property
    def signed(self) -> float:
        return self.E_pi - self.E_rho

    @property
    def delta(self) -> float:
        return abs(self.signed)


def delta_curve(
    beta: float, h: float, n_grid: Sequence[int], h_fn: TestFunction, source: str = "extracted"
) -> list[DeltaPoint]:
    """``Delta(n) = |E_pi h(eta) - E_rho h|`` for every ``n``, no sampling."""
    if not h_fn.bounded:
        raise ValueError(f"test function {h_fn.name!r} is unbounded")
    E_rho = limit_density(beta, h, source).expect(h_fn).value
    return [DeltaPoint(int(n), lattice_expectation(ModelParams(n, beta, h), h_fn), E_rho) for n in n_grid]


@dataclass(frozen=True)
class GapDecomposition:
    """``E_pi[G_n f - G_inf f]`` and its split into three lattice sums.

    With ``G_n f = n^alpha [p+ (f(eta+s) - f(eta)) + p- (f(eta-s) - f(eta))]``
    and Taylor expansion in ``s``:

    * ``E1 = E_pi[(2 (p+ + p-) - a/2) f'']`` (jump intensity vs diffusion),
    * ``E2 = E_pi[(n^alpha s (p+ - p-) - b) f']`` (drift mismatch),
    * ``E3`` the Taylor remainder beyond second order.
    """

    n: int
    gap: float
    signed_delta: float
    E1: float
    E2: float
    E3: float
    lattice_residual: float  # max |G_inf f - (E h - h)| at lattice points
    tolerance: float

    @property
    def closure_error(self) -> float:
        return abs(self.gap - self.signed_delta)

    @property
    def decomposition_error(self) -> float:
        return abs(self.E1 + self.E2 + self.E3 - self.gap)

    @property
    def closed(self) -> bool:
        return self.closure_error <= self.tolerance


def _covering_solution(sol: SteinSolution, eta: np.ndarray, step: float) -> SteinSolution:
    need = float(np.max(np.abs(eta))) + 2 * step
    if sol.covers(np.array([-need, need])):
        return sol
    cfg = GridConfig(**{**sol.config.__dict__, "radius": math.ceil(need)})
    return solve_stein(sol.spec, sol.h, cfg, check=False)


def generator_gap(
    beta: float, h: float, n: int, sol: SteinSolution, E_rho: Optional[float] = None, closure_factor: float = 10.0
) -> GapDecomposition:
    """Lattice sum of ``(G_n f - G_inf f) pi_n`` over states with mass above the cutoff.

    ``f`` and ``f'`` come from Hermite interpolation of the solution, ``f''``
    at a lattice point from the derivative of the ``(f', f'')`` interpolant,
    so ``G_inf f`` is not the Stein equation restated.  The tolerance is
    ``closure_factor * max(residual_max, lattice_residual)``; ``|sum pi r|``
    is at most the largest residual ``r`` because ``pi`` is a probability.
    Added to it: the gap between ``E_rho`` and the solver's own ``E h(Y)``
    (two quadratures of one integral) and a rounding floor.
    If the lattice leaves the solved grid the equation is re-solved on a
    wider one.
    """
    params = ModelParams(n, beta, h)
    regime = Regime.classify(beta, h)
    scheme, eta_all = _lattice_eta(params, regime)
    dist = exact_dist(params)
    p = dist.probs
    keep = p > LATTICE_MASS_CUTOFF
    k = np.nonzero(keep)[0]
    eta = eta_all[k]
    s = scheme.step
    sol = _covering_solution(sol, eta, s)
    f_spline, fp_spline = sol._splines()

    p_plus_all, p_minus_all = mh_rate_arrays(params)
    pp, pm = p_plus_all[k], p_minus_all[k]
    speed = n**scheme.alpha
    f0 = f_spline(eta)
    up = np.where(pp > 0, f_spline(eta + s) - f0, 0.0)
    dn = np.where(pm > 0, f_spline(eta - s) - f0, 0.0)
    Gn = speed * (pp * up + pm * dn)

    fp = fp_spline(eta)
    fpp = fp_spline.derivative()(eta)
    a = sol.spec.a(eta)
    b = sol.spec.b(eta)
    Ginf = 0.5 * a * fpp + b * fp
    r = Ginf - (sol.Eh_Y - sol.h(eta))

    w = p[k]
    taylor_up = up - (s * fp + 0.5 * s * s * fpp)
    taylor_dn = dn - (-s * fp + 0.5 * s * s * fpp)
    E1_terms = (0.5 * speed * s * s * (pp + pm) - 0.5 * a) * fpp
    E2_terms = (speed * s * (pp - pm) - b) * fp
    E3_terms = speed * (pp * taylor_up + pm * taylor_dn)

    def wsum(x):
        t = w * x
        return math.fsum(t[np.argsort(np.abs(t), kind="stable")])

    if E_rho is None:
        E_rho = sol.Eh_Y
    E_pi = lattice_expectation(params, sol.h)
    lattice_res = float(np.max(np.abs(r)))
    return GapDecomposition(
        n=n,
        gap=wsum(Gn - Ginf),
        signed_delta=E_pi - E_rho,
        E1=wsum(E1_terms),
        E2=wsum(E2_terms),
        E3=wsum(E3_terms),
        lattice_residual=lattice_res,
        tolerance=closure_factor * max(sol.residual_max, lattice_res) + abs(E_rho - sol.Eh_Y) + ROUNDING_FLOOR,
    )


@dataclass(frozen=True)
class RateFit:
    fitted: bool
    slope: float
    intercept: float
    slope_stderr: float
    band: tuple  # 95% confidence interval for the slope
    residuals: tuple
    n_used: tuple
    excluded: tuple  # n values dropped because Delta was an exact zero
    rate: float
    scaled: tuple  # Delta(n) n^rate over the whole grid
    scaled_max: float
    argmax_n: int
    note: str = ""


MIN_FIT_POINTS = 4


def fit_rate(ns: Sequence[int], deltas: Sequence[float], rate: float, zero_tol: float = 0.0) -> RateFit:
    """Least squares on ``(log n, log Delta)``; zeros are excluded with a note."""
    ns = np.asarray(ns, dtype=float)
    deltas = np.asarray(deltas, dtype=float)
    if np.any(np.diff(ns) <= 0):
        raise ValueError("n grid must be strictly increasing")
    if np.any(deltas < 0):
        raise ValueError("Delta values must be >= 0")
    scaled = deltas * ns**rate
    i_max = int(np.argmax(scaled))
    pos = deltas > zero_tol
    excluded = tuple(int(n) for n in ns[~pos])
    common = dict(
        rate=rate,
        scaled=tuple(float(v) for v in scaled),
        scaled_max=float(scaled[i_max]),
        argmax_n=int(ns[i_max]),
        excluded=excluded,
    )
    if pos.sum() < MIN_FIT_POINTS:
        return RateFit(
            False, math.nan, math.nan, math.nan, (math.nan, math.nan), (), tuple(int(n) for n in ns[pos]),
            note=f"only {int(pos.sum())} nonzero points; need {MIN_FIT_POINTS} for a fit", **common,
        )
    x, y = np.log(ns[pos]), np.log(deltas[pos])
    res = stats.linregress(x, y)
    dof = len(x) - 2
    tq = stats.t.ppf(0.975, dof) if dof > 0 else math.inf
    resid = y - (res.intercept + res.slope * x)
    note = f"excluded zero-Delta points at n={list(excluded)}" if excluded else ""
    return RateFit(
        True,
        float(res.slope),
        float(res.intercept),
        float(res.stderr),
        (float(res.slope - tq * res.stderr), float(res.slope + tq * res.stderr)),
        tuple(float(v) for v in resid),
        tuple(int(n) for n in ns[pos]),
        note=note,
        **common,
    )


@dataclass
class CurveResult:
    fn: str
    points: list
    gaps: list
    fit: RateFit

    def rows(self) -> list[dict]:
        gap_by_n = {g.n: g for g in self.gaps}
        out = []
        for pt, sc in zip(self.points, self.fit.scaled):
            g = gap_by_n.get(pt.n)
            out.append(
                {
                    "n": pt.n,
                    "delta": pt.delta,
                    "scaled_delta": sc,
                    "generator_gap": g.gap if g else math.nan,
                }
            )
        return out


@dataclass
class RateExperiment:
    regime: Regime
    beta: float
    h: float
    n_grid: tuple
    functions: tuple
    source: str = "extracted"
    curves: list = field(default_factory=list)

    def __post_init__(self):
        self.n_grid = tuple(int(n) for n in self.n_grid)
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ValueError("n_grid must be strictly increasing")

    @property
    def rate(self) -> float:
        return self.regime.claimed_rate


def _curve(beta, h, n_grid, fn: TestFunction, source, gap_ns, rate) -> CurveResult:
    points = delta_curve(beta, h, n_grid, fn, source)
    gaps = []
    if gap_ns:
        sol = solve_stein(limit_spec(beta, h, source), fn)
        E_rho = points[0].E_rho
        gaps = [generator_gap(beta, h, n, sol, E_rho) for n in gap_ns]
    fit = fit_rate([p.n for p in points], [p.delta for p in points], rate, ZERO_DELTA * max(fn.sup_norm, 1e-300))
    return CurveResult(fn.name, points, gaps, fit)


def run_experiment(
    beta: float,
    h: float,
    n_grid: Sequence[int],
    functions: Sequence[TestFunction],
    gap_ns: Sequence[int] = (),
    source: str = "extracted",
    threads: int = 1,
) -> RateExperiment:
    """Delta curves (and optionally generator gaps) for each test function.

    Curves are independent; with ``threads > 1`` they run on a thread pool
    and are collected in input order, so results do not depend on scheduling.
    """
    regime = Regime.classify(beta, h)
    exp = RateExperiment(regime, beta, h, tuple(n_grid), tuple(f.name for f in functions), source)
    # warm the cached spec/density before fanning out
    limit_density(beta, h, source)

    def job(fn):
        return _curve(beta, h, exp.n_grid, fn, source, tuple(gap_ns), exp.rate)

    if threads > 1 and len(functions) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            exp.curves = list(pool.map(job, functions))
    else:
        exp.curves = [job(fn) for fn in functions]
    return exp


def variance_crosscheck(
    beta: float, n_grid: Sequence[int] = tuple(2**j for j in range(8, 15)), rel_tol: float = 1e-2, ou_tol: float = 1e-3
) -> dict:
    """Exact ``Var(eta)`` at ``h = 0`` extrapolated in ``n`` against ``1/(1 - beta)`` and the OU variance."""
    vals = []
    for n in n_grid:
        params = ModelParams(n, beta, 0.0)
        dist = exact_dist(params)
        eta = math.sqrt(n) * dist.m
        mean = math.fsum(eta * dist.probs)
        vals.append(math.fsum((eta - mean) ** 2 * dist.probs))
    ratio = n_grid[1] / n_grid[0]
    limit, err = richardson(vals, ratio, orders=[1.0, 2.0, 3.0][: len(vals) - 2])
    spec = limit_spec(beta, 0.0)
    ou_var = ou_variance(float(spec.a(0.0)), float(spec.b_prime(0.0)))
    target = 1.0 / (1.0 - beta)
    return {
        "beta": beta,
        "n": list(n_grid),
        "variance": vals,
        "extrapolated": limit,
        "extrapolation_err_est": err,
        "target": target,
        "ou_variance": ou_var,
        "rel_err_target": abs(limit / target - 1.0),
        "abs_err_ou": abs(limit - ou_var),
        "passed": bool(abs(limit / target - 1.0) < rel_tol and abs(limit - ou_var) < ou_tol),
    }


def binomial_gaussian_check(fn: TestFunction, n_grid: Sequence[int]) -> dict:
    """``beta = 0``: the chain law is a centred binomial; compare with the standard normal directly.

    The normal expectation is computed independently of the limit-spec
    machinery (fixed Gauss-Hermite rule), and ``Delta(n) sqrt(n)`` is
    reported next to the pipeline's values.
    """
    x, w = np.polynomial.hermite_e.hermegauss(200)
    E_norm = float(np.sum(w * fn(x)) / math.sqrt(2 * math.pi))
    pipeline = delta_curve(0.0, 0.0, n_grid, fn)
    rows = []
    for pt in pipeline:
        direct = abs(pt.E_pi - E_norm)
        rows.append(
            {
                "n": pt.n,
                "delta_pipeline": pt.delta,
                "delta_direct": direct,
                "scaled": pt.delta * math.sqrt(pt.n),
            }
        )
    scaled = [r["scaled"] for r in rows]
    return {
        "fn": fn.name,
        "E_normal": E_norm,
        "rows": rows,
        "max_pipeline_vs_direct": max(abs(r["delta_pipeline"] - r["delta_direct"]) for r in rows),
        "scaled_bounded": bool(int(np.argmax(scaled)) == 0 or max(scaled) <= 1.5 * scaled[0]),
    }
