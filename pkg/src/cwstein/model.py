"""Curie-Weiss model primitives.

The Gibbs measure on ``{-1, +1}^n`` with energy ``H(x) = -n (m^2/2 + h m)``
depends on a configuration only through its magnetization ``m``, so
everything here works on the ``n + 1`` point magnetization grid indexed by
the number of up spins ``k`` (``m = (2k - n)/n``).  Weights are kept in the
log domain; ``n = 10^5`` overflows direct exponentials.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

from .reporting import AuditReport

_M0_MAX_ITER = 200


@dataclass(frozen=True)
class ModelParams:
    n: int
    beta: float
    h: float = 0.0

    def __post_init__(self):
        if isinstance(self.n, bool) or int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))
        if not math.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"beta must be finite and >= 0, got {self.beta!r}")
        if not math.isfinite(self.h):
            raise ValueError(f"h must be finite, got {self.h!r}")


class Regime(enum.Enum):
    CRITICAL = "critical"
    SUPERCRITICAL = "supercritical"

    @classmethod
    def classify(cls, beta: float, h: float) -> "Regime":
        """Phase of ``(beta, h)``; raises ``ValueError`` outside both phases."""
        if beta == 1.0 and h == 0.0:
            return cls.CRITICAL
        if 0.0 <= beta < 1.0:
            return cls.SUPERCRITICAL
        raise ValueError(
            f"(beta={beta}, h={h}) is neither critical (beta=1, h=0) "
            "nor supercritical (0 <= beta < 1)"
        )

    @property
    def gamma(self) -> float:
        return 0.25 if self is Regime.CRITICAL else 0.5

    @property
    def claimed_rate(self) -> float:
        return 0.25 if self is Regime.CRITICAL else 0.5


def solve_m0(beta: float, h: float) -> float:
    """Concentration point: the solution of ``m = tanh(beta (m + h))``.

    For ``beta > 1, h = 0`` the positive root is returned (0 is a local
    maximum of the rate function there).  Negative ``h`` is reduced to
    positive ``h`` by the sign symmetry.
    """
    if not (math.isfinite(beta) and math.isfinite(h)) or beta < 0:
        raise ValueError(f"invalid (beta, h) = ({beta}, {h})")
    if h < 0:
        return -solve_m0(beta, -h)
    if beta == 0.0 or (h == 0.0 and beta <= 1.0):
        return 0.0

    def g(m):
        return m - math.tanh(beta * (m + h))

    lo, hi = 0.0, 1.0 - 1e-15
    if h == 0.0:
        # g > 0 just right of the trivial root must be stepped over
        lo = 0.5
        while g(lo) >= 0.0:
            lo *= 0.5
            if lo < 1e-300:
                raise RuntimeError("could not bracket the positive fixed point")
    if g(hi) <= 0.0:
        return hi
    for _ in range(_M0_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if g(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-6:
            break
    m = 0.5 * (lo + hi)
    for _ in range(50):
        t = math.tanh(beta * (m + h))
        step = (m - t) / (1.0 - beta * (1.0 - t * t))
        m_new = min(max(m - step, lo), hi)
        if abs(m_new - m) < 1e-17:
            m = m_new
            break
        m = m_new
    if abs(g(m)) >= 1e-12:
        raise RuntimeError(f"fixed-point iteration did not converge for beta={beta}, h={h}")
    return m


@dataclass(frozen=True)
class RateFunction:
    beta: float
    h: float

    def __call__(self, m):
        m = np.asarray(m, dtype=float)
        if np.any(np.abs(m) > 1.0):
            raise ValueError("rate function is defined on [-1, 1] only")
        val = (
            -(0.5 * self.beta * m**2 + self.beta * self.h * m)
            + 0.5 * xlogy(1.0 - m, 1.0 - m)
            + 0.5 * xlogy(1.0 + m, 1.0 + m)
        )
        return float(val) if val.ndim == 0 else val


def rate_function(params: ModelParams) -> RateFunction:
    return RateFunction(params.beta, params.h)


@dataclass(frozen=True)
class MagnetizationDist:
    """Exact law of the magnetization, indexed by up-spin count ``k``.

    ``log_weights`` are unnormalized and shifted so their maximum is 0.
    """

    n: int
    beta: float
    h: float
    log_weights: np.ndarray
    log_Z: float

    @property
    def k(self) -> np.ndarray:
        return np.arange(self.n + 1)

    @property
    def m(self) -> np.ndarray:
        return (2 * self.k - self.n) / self.n

    @property
    def log_probs(self) -> np.ndarray:
        return self.log_weights - self.log_Z

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


def magnetization_grid(n: int) -> np.ndarray:
    k = np.arange(n + 1)
    return (2 * k - n) / n


def exact_dist(params: ModelParams) -> MagnetizationDist:
    n, beta, h = params.n, params.beta, params.h
    k = np.arange(n + 1)
    m = (2 * k - n) / n
    log_binom = gammaln(n + 1) - (gammaln(k + 1) + gammaln(n - k + 1))
    log_w = log_binom + n * beta * (0.5 * m * m + h * m)
    # rebase so log_Z is O(log n): an absolute log_Z near n*beta would cost
    # digits of every normalized probability
    log_w = log_w - log_w.max()
    log_w.setflags(write=False)
    return MagnetizationDist(n, beta, h, log_w, float(logsumexp(log_w)))


def hamiltonian(m, n: int, h: float):
    """Spin energy as a function of magnetization: ``-n (m^2/2 + h m)``."""
    m = np.asarray(m, dtype=float)
    return -n * (0.5 * m * m + h * m)


def expect(dist: MagnetizationDist, phi: Callable) -> float:
    terms = np.asarray(phi(dist.m), dtype=float) * dist.probs
    if terms.shape != (dist.n + 1,):
        terms = np.broadcast_to(terms, (dist.n + 1,))
    terms = terms[np.argsort(np.abs(terms), kind="stable")]
    return math.fsum(terms)


def _log_mass(dist: MagnetizationDist, mask: np.ndarray) -> float:
    if not np.any(mask):
        return -math.inf
    return float(logsumexp(dist.log_probs[mask]))


def tail_audit_general(params: ModelParams, t_grid: Sequence[float]) -> AuditReport:
    """Check ``P(|m - tanh(beta(m+h))| >= beta/n + t/sqrt(n)) <= 2 exp(-t^2/(4(1+beta)))``."""
    dist = exact_dist(params)
    n, beta, h = params.n, params.beta, params.h
    dev = np.abs(dist.m - np.tanh(beta * (dist.m + h)))
    rows = []
    for t in t_grid:
        if t < 0:
            raise ValueError("t must be >= 0")
        thresh = beta / n + t / math.sqrt(n)
        lhs = math.exp(_log_mass(dist, dev >= thresh))
        rhs = 2.0 * math.exp(-t * t / (4.0 * (1.0 + beta)))
        rows.append({"t": float(t), "lhs": lhs, "rhs": rhs, "violated": lhs > rhs})
    n_viol = sum(r["violated"] for r in rows)
    return AuditReport(
        name="tail_general",
        passed=n_viol == 0,
        summary={"n": n, "beta": beta, "h": h, "violations": n_viol},
        rows=rows,
    )


def tail_audit_critical(n: int, t_grid: Sequence[float]) -> AuditReport:
    """Empirical admissible constant in ``P(|m| >= t^{1/4}) <= 2 exp(-c n t)``.

    ``c_emp = -log(lhs/2)/(n t)`` is the largest ``c`` for which the bound
    holds at that ``(n, t)``.
    """
    dist = exact_dist(ModelParams(n, 1.0, 0.0))
    abs_m = np.abs(dist.m)
    rows = []
    for t in t_grid:
        if not 0.0 < t <= 1.0:
            raise ValueError("t must lie in (0, 1]")
        log_lhs = _log_mass(dist, abs_m >= t**0.25)
        c_emp = -(log_lhs - math.log(2.0)) / (n * t)
        rows.append({"t": float(t), "lhs": math.exp(log_lhs), "log_lhs": log_lhs, "c_emp": c_emp})
    c_min = min(r["c_emp"] for r in rows)
    return AuditReport(
        name="tail_critical",
        passed=bool(c_min > 0.0),
        summary={"n": n, "c_emp_min": c_min},
        rows=rows,
    )


def double_factorial(k: int) -> int:
    return math.prod(range(k, 0, -2))


def scaled_moments(params: ModelParams, regime: Regime, k_max: int) -> np.ndarray:
    """``E|eta|^k`` for ``k = 1..k_max`` under the exact law, ``eta = n^gamma (m - m0)``."""
    dist = exact_dist(params)
    m0 = solve_m0(params.beta, params.h)
    eta = params.n**regime.gamma * (dist.m - m0)
    p = dist.probs
    return np.array([math.fsum(np.abs(eta) ** k * p) for k in range(1, k_max + 1)])


def moment_constant(moments: np.ndarray) -> float:
    """Smallest ``C`` with ``moments[k-1] <= C^k k!!`` for every ``k``."""
    return max(
        (mk / double_factorial(k)) ** (1.0 / k) for k, mk in enumerate(moments, start=1)
    )


def moment_audit(
    beta: float,
    h: float,
    n_grid: Sequence[int],
    k_max: int = 8,
    spread_tol: float = 1.1,
) -> AuditReport:
    """Moment growth ``E|eta|^k <= C^k k!!`` with ``C`` stable over system sizes.

    Passes when every ``C(n)`` is finite and ``max C / min C <= spread_tol``.
    """
    regime = Regime.classify(beta, h)
    rows = []
    for n in n_grid:
        mom = scaled_moments(ModelParams(n, beta, h), regime, k_max)
        rows.append({"n": int(n), "moments": mom.tolist(), "C": moment_constant(mom)})
    cs = [r["C"] for r in rows]
    ok = all(math.isfinite(c) for c in cs) and max(cs) <= spread_tol * min(cs)
    return AuditReport(
        name="moments",
        passed=bool(ok),
        summary={
            "beta": beta,
            "h": h,
            "regime": regime.value,
            "k_max": k_max,
            "C": max(cs),
            "C_spread": max(cs) / min(cs),
        },
        rows=rows,
    )


MAX_ENUMERATION_N = 20


def brute_force_law(params: ModelParams) -> np.ndarray:
    """Magnetization law by summing Gibbs weights over all ``2^n`` spin configurations.

    Independent of the binomial formula in :func:`exact_dist`: each
    configuration's energy is evaluated from its spins and weights are
    accumulated per up-spin count.
    """
    n = params.n
    if n > MAX_ENUMERATION_N:
        raise ValueError(f"enumeration limited to n <= {MAX_ENUMERATION_N}")
    idx = np.arange(2**n, dtype=np.int64)
    bits = (idx[:, None] >> np.arange(n)) & 1
    spins = 2 * bits - 1
    sum_s = spins.sum(axis=1)
    # -H = (1/(2n)) sum_{i,j} s_i s_j + h sum_i s_i
    pair = np.einsum("ci,cj->c", spins, spins) / (2.0 * n)
    log_w = params.beta * (pair + params.h * sum_s)
    k = bits.sum(axis=1)
    w = np.exp(log_w - log_w.max())
    order = np.argsort(k, kind="stable")
    groups = np.split(w[order], np.cumsum(np.bincount(k, minlength=n + 1))[:-1])
    totals = np.array([math.fsum(g) for g in groups])
    return totals / math.fsum(totals)
