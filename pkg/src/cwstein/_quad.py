"""Cell-wise Gauss-Legendre quadrature and finite-difference helpers."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def gauss_legendre_unit(q: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the ``q``-point rule on ``[0, 1]``."""
    x, w = np.polynomial.legendre.leggauss(q)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True)
class CellGrid:
    """Uniform cells ``[edges[i], edges[i+1]]`` with ``q`` Gauss nodes each."""

    edges: np.ndarray
    q: int = 8

    @classmethod
    def uniform(cls, lo: float, hi: float, dx: float, q: int = 8) -> "CellGrid":
        # edges are integer multiples of dx so that 0 and dyadic breakpoints are nodes
        i_lo = int(np.floor(lo / dx + 1e-9))
        i_hi = int(np.ceil(hi / dx - 1e-9))
        return cls(np.arange(i_lo, i_hi + 1) * dx, q)

    @property
    def dx(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @property
    def ncell(self) -> int:
        return len(self.edges) - 1

    @property
    def nodes(self) -> np.ndarray:
        t, _ = gauss_legendre_unit(self.q)
        return self.edges[:-1, None] + self.dx * t[None, :]

    @property
    def weights(self) -> np.ndarray:
        _, w = gauss_legendre_unit(self.q)
        return np.broadcast_to(self.dx * w, (self.ncell, self.q))

    def cell_integrals(self, values: np.ndarray) -> np.ndarray:
        """Per-cell integrals of a function sampled at :attr:`nodes`."""
        return np.sum(values * self.weights, axis=1)


def fd_first(y: np.ndarray, dx: float) -> np.ndarray:
    """Fourth-order first derivative; one-sided stencils at the ends."""
    y = np.asarray(y, dtype=float)
    d = np.empty_like(y)
    d[2:-2] = (y[:-4] - 8 * y[1:-3] + 8 * y[3:-1] - y[4:]) / (12 * dx)
    c = np.array([-25, 48, -36, 16, -3]) / (12 * dx)
    d[0] = c @ y[:5]
    d[1] = np.array([-3, -10, 18, -6, 1]) / (12 * dx) @ y[:5]
    d[-1] = -(c @ y[-1:-6:-1])
    d[-2] = -(np.array([-3, -10, 18, -6, 1]) / (12 * dx) @ y[-1:-6:-1])
    return d


def stencil_clean(x: np.ndarray, breakpoints, dx: float, width: int = 4) -> np.ndarray:
    """Mask of points whose FD stencil does not straddle a breakpoint."""
    mask = np.ones(len(x), dtype=bool)
    for b in breakpoints:
        mask &= np.abs(x - b) > width * dx * (1 + 1e-9)
    return mask
