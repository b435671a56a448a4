"""Metropolis-Hastings magnetization chain and its scaled form.

The chain lives on the up-spin count ``k``; the scaled state is
``eta = n^gamma (m - m0)`` and one spin flip moves ``eta`` by
``s = 2 n^(gamma - 1)``.  Acceptance probabilities come straight from the
energy difference of a single flip, which makes the chain reversible with
respect to :func:`cwstein.model.exact_dist` by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numba
import numpy as np
from scipy import sparse

from .model import MagnetizationDist, ModelParams, Regime, exact_dist, hamiltonian, solve_m0
from .reporting import AuditReport


class DegenerateKernelError(ValueError):
    """An interior transition rate vanished, so the chain is not irreducible."""


@dataclass(frozen=True)
class ScalingScheme:
    n: int
    gamma: float
    alpha: float
    delta: float
    m0: float
    regime: Optional[Regime] = None

    @property
    def step(self) -> float:
        """Displacement of ``eta`` under one spin flip."""
        return 2.0 * self.delta

    def eta(self, k):
        k = np.asarray(k)
        return self.n**self.gamma * ((2 * k - self.n) / self.n - self.m0)


def scaling_scheme(params: ModelParams, regime: Optional[Regime] = None) -> ScalingScheme:
    """Regime-dependent scaling; time exponent is ``alpha = 2 (1 - gamma)``."""
    if regime is None:
        regime = Regime.classify(params.beta, params.h)
    gamma = regime.gamma
    return ScalingScheme(
        n=params.n,
        gamma=gamma,
        alpha=2.0 * (1.0 - gamma),
        delta=params.n ** (gamma - 1.0),
        m0=solve_m0(params.beta, params.h),
        regime=regime,
    )


@dataclass(frozen=True)
class ChainState:
    k: int
    n: int

    def __post_init__(self):
        if not 0 <= self.k <= self.n:
            raise ValueError(f"k={self.k} outside [0, {self.n}]")

    @property
    def m(self) -> float:
        return (2 * self.k - self.n) / self.n

    def eta(self, scheme: ScalingScheme) -> float:
        return float(scheme.eta(self.k))


@dataclass(frozen=True)
class KernelRates:
    p_plus: float
    p_minus: float
    p_stay: float


def proposal_rates(state: ChainState, scheme: ScalingScheme | None = None) -> tuple[float, float]:
    """Lumped single-flip proposal: ``((1 - m)/2, (1 + m)/2)``."""
    n, k = state.n, state.k
    return (n - k) / n, k / n


def potential_phi(eta, scheme: ScalingScheme, h: float):
    """Energy as a function of the scaled state, up to an additive constant."""
    eta = np.asarray(eta, dtype=float)
    n, g = scheme.n, scheme.gamma
    return -0.5 * n ** (1 - 2 * g) * eta**2 - n ** (1 - g) * (scheme.m0 + h) * eta


def _energy_steps(k: np.ndarray, n: int, h: float) -> tuple[np.ndarray, np.ndarray]:
    # H(k+1) - H(k) and H(k-1) - H(k) in closed form; integer numerators keep
    # dH_up(k) == -dH_down(k+1) bit for bit
    up = -((4 * k - 2 * n + 2) / n + 2.0 * h)
    down = (4 * k - 2 * n - 2) / n + 2.0 * h
    return up, down


def mh_rate_arrays(params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """``(p_plus[k], p_minus[k])`` for every ``k = 0..n``."""
    n, beta, h = params.n, params.beta, params.h
    k = np.arange(n + 1)
    d_up, d_down = _energy_steps(k, n, h)
    acc_up = np.exp(np.minimum(0.0, -beta * d_up))
    acc_down = np.exp(np.minimum(0.0, -beta * d_down))
    p_plus = (n - k) / n * acc_up
    p_minus = k / n * acc_down
    return p_plus, p_minus


def mh_rates(state: ChainState, scheme: ScalingScheme | None, beta: float, h: float) -> KernelRates:
    q_plus, q_minus = proposal_rates(state)
    d_up, d_down = _energy_steps(np.asarray(state.k), state.n, h)
    p_plus = q_plus * math.exp(min(0.0, -beta * float(d_up)))
    p_minus = q_minus * math.exp(min(0.0, -beta * float(d_down)))
    return KernelRates(p_plus, p_minus, 1.0 - p_plus - p_minus)


def acceptance_exponent_variants(params: ModelParams, scheme: ScalingScheme) -> dict:
    """Compare the flip-energy acceptance exponents with two alternative closed forms.

    ``single_u`` uses ``+-beta (u +- 2 m0 +- 2 h + 2/n)`` and ``double_u`` uses
    ``beta (2u +- 2 m0 +- 2 h + 2/n)`` with ``u = eta/(n delta) = m - m0``.
    Returns the max deviation of each from the derived exponent over the lattice.
    """
    n, beta, h, m0 = params.n, params.beta, params.h, scheme.m0
    k = np.arange(n + 1)
    u = (2 * k - n) / n - m0
    d_up, d_down = _energy_steps(k, n, h)
    derived_up, derived_down = -beta * d_up, -beta * d_down
    variants = {
        "single_u": (
            beta * (u + 2 * m0 + 2 * h + 2 / n),
            -beta * (u - 2 * m0 - 2 * h + 2 / n),
        ),
        "double_u": (
            beta * (2 * u + 2 * m0 + 2 * h + 2 / n),
            beta * (2 * u - 2 * m0 - 2 * h + 2 / n),
        ),
    }
    out = {}
    for name, (up, down) in variants.items():
        out[name] = {
            "max_dev_up": float(np.max(np.abs(up - derived_up))),
            "max_dev_down": float(np.max(np.abs(down - derived_down))),
        }
        out[name]["matches"] = max(out[name]["max_dev_up"], out[name]["max_dev_down"]) < 1e-12
    return out


@dataclass(frozen=True)
class TridiagonalKernel:
    """Row ``k`` moves to ``k+1`` w.p. ``up[k]``, to ``k-1`` w.p. ``down[k]``."""

    params: ModelParams
    up: np.ndarray
    down: np.ndarray
    stay: np.ndarray

    def to_sparse(self) -> sparse.csr_matrix:
        n = self.params.n
        return sparse.diags(
            [self.down[1:], self.stay, self.up[:-1]], offsets=[-1, 0, 1], shape=(n + 1, n + 1)
        ).tocsr()

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()


def kernel_matrix(
    params: ModelParams, scheme: ScalingScheme | None = None, laziness: float = 0.0
) -> TridiagonalKernel:
    """Assemble the kernel; ``laziness`` mixes in a holding probability."""
    if not 0.0 <= laziness < 1.0:
        raise ValueError("laziness must lie in [0, 1)")
    p_plus, p_minus = mh_rate_arrays(params)
    up = (1.0 - laziness) * p_plus
    down = (1.0 - laziness) * p_minus
    # up + down can exceed 1 by an ulp when every move is accepted
    stay = np.maximum(1.0 - up - down, 0.0)
    return TridiagonalKernel(params, up, down, stay)


@dataclass(frozen=True)
class StationaryReport:
    exact_pushforward: MagnetizationDist
    kernel_stationary: np.ndarray
    tv_distance: float


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * math.fsum(np.abs(np.asarray(p) - np.asarray(q)))


def stationary_solve(kernel: TridiagonalKernel) -> StationaryReport:
    """Stationary law from the birth-death product recursion, in log domain."""
    up, down = kernel.up, kernel.down
    if np.any(up[:-1] <= 0.0) or np.any(down[1:] <= 0.0):
        bad = np.flatnonzero(np.concatenate([up[:-1] <= 0.0, down[1:] <= 0.0]))
        raise DegenerateKernelError(f"vanishing interior rates at positions {bad[:10].tolist()}")
    log_ratio = np.log(up[:-1]) - np.log(down[1:])
    log_pi = np.concatenate([[0.0], np.cumsum(log_ratio)])
    log_pi -= log_pi.max()
    pi = np.exp(log_pi)
    pi /= math.fsum(pi)
    exact = exact_dist(kernel.params)
    return StationaryReport(exact, pi, tv_distance(pi, exact.probs))


# -- simulation ---------------------------------------------------------------

@numba.njit(cache=True)
def _advance(k, up, down, u, counts):
    for i in range(u.shape[0]):
        x = u[i]
        if x < up[k]:
            k += 1
        elif x < up[k] + down[k]:
            k -= 1
        counts[k] += 1
    return k


@dataclass(frozen=True)
class SimulationSummary:
    n: int
    steps: int
    seed: int
    initial_k: int
    final_k: int
    counts: np.ndarray

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def time_average(self, phi: Callable) -> float:
        m = (2 * np.arange(self.n + 1) - self.n) / self.n
        return math.fsum(np.asarray(phi(m), dtype=float) * self.frequencies)


def simulate(
    params: ModelParams,
    steps: int,
    seed: int,
    initial: ChainState | None = None,
    scheme: ScalingScheme | None = None,
    chunk: int = 1 << 20,
) -> SimulationSummary:
    """Run the chain; the histogram counts the states at times ``0..steps``."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    n = params.n
    if initial is None:
        initial = ChainState(n // 2, n)
    if initial.n != n:
        raise ValueError("initial state belongs to a different system size")
    up, down = mh_rate_arrays(params)
    rng = np.random.default_rng(seed)
    counts = np.zeros(n + 1, dtype=np.int64)
    counts[initial.k] += 1
    k = initial.k
    remaining = steps
    while remaining > 0:
        size = min(chunk, remaining)
        k = _advance(k, up, down, rng.random(size), counts)
        remaining -= size
    return SimulationSummary(n, steps, seed, initial.k, int(k), counts)


# -- expansions of p_plus +- p_minus --------------------------------------------

def _branch(m0: float, h: float, eta: float) -> float:
    # which of the two moves is always accepted near m0
    s = m0 + h
    if s != 0.0:
        return math.copysign(1.0, s)
    if eta == 0.0:
        return 0.0
    return math.copysign(1.0, eta)


@dataclass(frozen=True)
class SumExpansion:
    value: float
    scale: float  # n delta
    leading: float
    leading_printed: float
    first_order: float
    first_order_printed: float

    @property
    def remainder(self) -> float:
        return self.value - self.leading - self.first_order

    @property
    def remainder_printed(self) -> float:
        return self.value - self.leading_printed - self.first_order_printed


def expansion_sum(eta: float, scheme: ScalingScheme, beta: float, h: float) -> SumExpansion:
    """Zeroth and first order terms of ``p_plus + p_minus`` at scaled state ``eta``.

    ``eta`` need not sit on the lattice; the rates are evaluated at
    ``m = m0 + eta/(n delta)`` from the same closed form as :func:`mh_rates`.
    The derived first-order coefficient is
    ``sigma [-|m0|/(1+|m0|) - beta (1 - |m0|)]`` where ``sigma`` is the sign of
    ``m0 + h`` (of ``eta`` when ``m0 + h = 0``); the printed one is
    ``beta (1 - m0) - m0/(1 + m0)``.
    """
    p_plus, p_minus, u = _rates_off_lattice(eta, scheme, beta, h)
    m0 = scheme.m0
    am0 = abs(m0)
    sigma = _branch(m0, h, eta)
    return SumExpansion(
        value=p_plus + p_minus,
        scale=scheme.n * scheme.delta,
        leading=1.0 - am0,
        leading_printed=1.0 - m0,
        first_order=sigma * u * (-am0 / (1.0 + am0) - beta * (1.0 - am0)),
        first_order_printed=u * (beta * (1.0 - m0) - m0 / (1.0 + m0)),
    )


def _rates_off_lattice(eta: float, scheme: ScalingScheme, beta: float, h: float):
    n = scheme.n
    u = eta / (n * scheme.delta)
    m = scheme.m0 + u
    if abs(m) > 1.0:
        raise ValueError(f"eta={eta} maps outside [-1, 1]")
    up_expo = beta * (2 * m + 2 * h + 2.0 / n)
    down_expo = beta * (-2 * m - 2 * h + 2.0 / n)
    p_plus = 0.5 * (1 - m) * math.exp(min(0.0, up_expo))
    p_minus = 0.5 * (1 + m) * math.exp(min(0.0, down_expo))
    return p_plus, p_minus, u


def drift_coefficient_derived(beta: float, h: float) -> float:
    """Supercritical limit of ``n^alpha s (p_plus - p_minus) / eta``."""
    am0 = abs(solve_m0(beta, h))
    return -2.0 * (1.0 / (1.0 + am0) - beta * (1.0 - am0))


def drift_coefficient_printed(beta: float, h: float) -> float:
    """Printed supercritical coefficient ``-(1-m0)[beta + 1/(2(1+m0))]``, times the step factor 2."""
    m0 = solve_m0(beta, h)
    return -2.0 * (1.0 - m0) * (beta + 1.0 / (2.0 * (1.0 + m0)))


@dataclass(frozen=True)
class DiffExpansion:
    value: float
    scaled: float  # n^alpha s (p_plus - p_minus)
    leading_printed: float
    leading: float  # derived limit of ``scaled``
    leading_extracted: Optional[float]

    @property
    def remainder(self) -> float:
        return self.scaled - self.leading


def expansion_diff(
    eta: float,
    scheme: ScalingScheme,
    beta: float,
    h: float,
    extracted: Optional[float] = None,
) -> DiffExpansion:
    """Leading behaviour of ``p_plus - p_minus`` on the generator scale.

    ``scaled = n^alpha s (p_plus - p_minus)`` is the drift the chain exerts
    at ``eta``.  Critical: printed and derived limits are both
    ``-(2/3) eta^3``.  Supercritical: printed ``c_printed eta``, derived
    ``c eta`` (see :func:`drift_coefficient_derived`); ``extracted`` is an
    optional numerically extrapolated coefficient reported alongside.
    """
    p_plus, p_minus, _ = _rates_off_lattice(eta, scheme, beta, h)
    diff = p_plus - p_minus
    scaled = scheme.n**scheme.alpha * scheme.step * diff
    if scheme.regime is Regime.CRITICAL:
        leading = leading_printed = -(2.0 / 3.0) * eta**3
    else:
        leading = drift_coefficient_derived(beta, h) * eta
        leading_printed = drift_coefficient_printed(beta, h) * eta
    return DiffExpansion(
        value=diff,
        scaled=scaled,
        leading_printed=leading_printed,
        leading=leading,
        leading_extracted=None if extracted is None else extracted * eta,
    )


def richardson(values: Sequence[float], ratio: float, orders: Sequence[float]) -> tuple[float, float]:
    """Eliminate error terms ``n^(-p)`` for ``p`` in ``orders`` from a geometric-n sequence.

    Returns ``(estimate, error_estimate)``; the error estimate is the gap
    between the last two entries of the final column.
    """
    col = list(values)
    for p in orders:
        if len(col) < 2:
            break
        f = ratio**p
        col = [(f * col[i + 1] - col[i]) / (f - 1.0) for i in range(len(col) - 1)]
    err = abs(col[-1] - col[-2]) if len(col) > 1 else math.inf
    return col[-1], err


def drift_limit_estimate(
    beta: float,
    h: float,
    eta: float = 1.0,
    n_grid: Sequence[int] = tuple(4**j for j in range(6, 13)),
) -> tuple[float, float]:
    """Richardson estimate of ``lim_n n^alpha s (p_plus - p_minus)/eta`` (supercritical)."""
    regime = Regime.classify(beta, h)
    if regime is not Regime.SUPERCRITICAL:
        raise ValueError("drift extraction needs the supercritical regime")
    ratios = [n_grid[i + 1] / n_grid[i] for i in range(len(n_grid) - 1)]
    if any(abs(r - ratios[0]) > 1e-12 * ratios[0] for r in ratios):
        raise ValueError("n_grid must be geometric")
    seq = []
    for n in n_grid:
        scheme = scaling_scheme(ModelParams(n, beta, h), regime)
        seq.append(expansion_diff(eta, scheme, beta, h).scaled / eta)
    # corrections come in powers of n^(-1/2)
    return richardson(seq, ratios[0], orders=[0.5, 1.0, 1.5, 2.0, 2.5][: len(seq) - 2])


def generator_apply(
    f: Callable, k, scheme: ScalingScheme, params: ModelParams
) -> np.ndarray:
    """``n^alpha [p_plus (f(eta+s) - f(eta)) + p_minus (f(eta-s) - f(eta))]`` at lattice ``k``."""
    k = np.asarray(k)
    p_plus, p_minus = mh_rate_arrays(params)
    eta = scheme.eta(k)
    s = scheme.step
    f0 = np.asarray(f(eta), dtype=float)
    out = p_plus[k] * (np.asarray(f(eta + s), dtype=float) - f0) + p_minus[k] * (
        np.asarray(f(eta - s), dtype=float) - f0
    )
    return scheme.n**scheme.alpha * out


def generator_on_lattice(values: np.ndarray, params: ModelParams, scheme: ScalingScheme) -> np.ndarray:
    """Discrete generator applied to a function given by its lattice values ``f(eta_k)``."""
    p_plus, p_minus = mh_rate_arrays(params)
    fwd = np.zeros_like(values)
    bwd = np.zeros_like(values)
    fwd[:-1] = values[1:] - values[:-1]
    bwd[1:] = values[:-1] - values[1:]
    return scheme.n**scheme.alpha * (p_plus * fwd + p_minus * bwd)


# -- audits ---------------------------------------------------------------------

def detailed_balance_error(params: ModelParams) -> float:
    """Max relative violation of ``pi(k) P(k,k+1) = pi(k+1) P(k+1,k)``."""
    dist = exact_dist(params)
    p_plus, p_minus = mh_rate_arrays(params)
    lp = dist.log_probs
    with np.errstate(divide="ignore"):
        lhs = lp[:-1] + np.log(p_plus[:-1])
        rhs = lp[1:] + np.log(p_minus[1:])
    return float(np.max(np.abs(np.expm1(lhs - rhs))))


def critical_drift_audit(
    etas: Sequence[float] = (0.5, 1.0, 2.0),
    n_grid: Sequence[int] = tuple(4**j for j in range(4, 9)),
    rel_tol: float = 0.05,
) -> AuditReport:
    """``n^alpha s (p_plus - p_minus) -> -(2/3) eta^3`` at ``beta = 1, h = 0``.

    Passes when, for every ``eta``, the relative error at the largest ``n`` is
    below ``rel_tol`` and the errors decrease along the grid.  The
    Richardson-extrapolated limit is reported as well.
    """
    rows = []
    ok = True
    for eta in etas:
        errs, scaled = [], []
        for n in n_grid:
            scheme = scaling_scheme(ModelParams(n, 1.0, 0.0))
            d = expansion_diff(eta, scheme, 1.0, 0.0)
            scaled.append(d.scaled)
            errs.append(abs(d.scaled / d.leading - 1.0))
        decreasing = all(b < a for a, b in zip(errs, errs[1:]))
        ratio = n_grid[1] / n_grid[0]
        limit, limit_err = richardson(scaled, ratio, orders=[0.25, 0.5, 0.75][: len(scaled) - 2])
        target = -(2.0 / 3.0) * eta**3
        row_ok = decreasing and errs[-1] < rel_tol
        ok &= row_ok
        rows.append(
            {
                "eta": eta,
                "n": list(n_grid),
                "scaled_drift": scaled,
                "rel_error": errs,
                "decreasing": decreasing,
                "rel_error_at_max_n": errs[-1],
                "extrapolated_limit": limit,
                "extrapolated_rel_error": abs(limit / target - 1.0),
                "extrapolation_err_est": limit_err,
                "passed": row_ok,
            }
        )
    return AuditReport("critical_drift", ok, {"rel_tol": rel_tol}, rows)


def remainder_audit(
    beta: float,
    h: float,
    eta: float = 1.0,
    n_grid: Sequence[int] = tuple(4**j for j in range(3, 10)),
    growth_tol: float = 1.5,
) -> AuditReport:
    """Scaled remainders of the ``p_plus + p_minus`` expansion.

    ``|remainder| (n delta)^2`` must stay bounded: passes when the value at
    the largest ``n`` is at most ``growth_tol`` times the max over the first
    half of the grid.  The same quantity built with the printed first-order
    coefficient is reported for comparison.
    """
    rows = []
    for n in n_grid:
        params = ModelParams(n, beta, h)
        scheme = scaling_scheme(params)
        e = expansion_sum(eta, scheme, beta, h)
        rows.append(
            {
                "n": n,
                "value": e.value,
                "scaled_remainder": abs(e.remainder) * e.scale**2,
                "scaled_remainder_printed": abs(e.remainder_printed) * e.scale**2,
            }
        )
    sr = [r["scaled_remainder"] for r in rows]
    head = max(sr[: max(1, len(sr) // 2)])
    passed = sr[-1] <= growth_tol * head
    srp = [r["scaled_remainder_printed"] for r in rows]
    return AuditReport(
        "sum_remainder",
        bool(passed),
        {
            "beta": beta,
            "h": h,
            "eta": eta,
            "max_scaled_remainder": max(sr),
            "printed_coefficient_bounded": bool(srp[-1] <= growth_tol * max(srp[: max(1, len(srp) // 2)])),
        },
        rows,
    )


def diff_remainder_audit(
    beta: float,
    h: float,
    eta: float = 1.0,
    n_grid: Sequence[int] = tuple(4**j for j in range(3, 10)),
    growth_tol: float = 1.5,
) -> AuditReport:
    """Supercritical drift remainder: ``|scaled - c eta| n^(1/2)`` stays bounded."""
    rows = []
    for n in n_grid:
        scheme = scaling_scheme(ModelParams(n, beta, h))
        d = expansion_diff(eta, scheme, beta, h)
        rows.append(
            {
                "n": n,
                "scaled_drift": d.scaled,
                "leading": d.leading,
                "leading_printed": d.leading_printed,
                "scaled_remainder": abs(d.remainder) * math.sqrt(n),
            }
        )
    sr = [r["scaled_remainder"] for r in rows]
    head = max(sr[: max(1, len(sr) // 2)])
    return AuditReport(
        "diff_remainder",
        bool(sr[-1] <= growth_tol * head),
        {"beta": beta, "h": h, "eta": eta, "max_scaled_remainder": max(sr)},
        rows,
    )
