"""Bounded test functions for the Stein equation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit


@dataclass(frozen=True)
class TestFunction:
    name: str
    fn: Callable
    derivative: Optional[Callable] = None
    sup_norm: float = float("inf")
    breakpoints: tuple = field(default_factory=tuple)
    lipschitz: Optional[float] = None

    __test__ = False  # keep pytest from collecting this class

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))

    @property
    def bounded(self) -> bool:
        return np.isfinite(self.sup_norm)

    @property
    def differentiable(self) -> bool:
        return self.derivative is not None


def constant(c: float = 1.0) -> TestFunction:
    return TestFunction(
        "const",
        lambda x: np.full_like(x, c, dtype=float),
        lambda x: np.zeros_like(x, dtype=float),
        abs(c),
        lipschitz=0.0,
    )


def clipped_identity(M: float = 2.0) -> TestFunction:
    """``clip(x, -M, M)``; kinks at ``+-M`` (no classical derivative there)."""
    return TestFunction("clip", lambda x: np.clip(x, -M, M), None, M, (-M, M), 1.0)


def tanh_fn() -> TestFunction:
    return TestFunction("tanh", np.tanh, lambda x: 1.0 / np.cosh(x) ** 2, 1.0, lipschitz=1.0)


def cos_fn() -> TestFunction:
    return TestFunction("cos", np.cos, lambda x: -np.sin(x), 1.0, lipschitz=1.0)


def smoothed_indicator(t: float = 0.5, eps: float = 0.5) -> TestFunction:
    """Logistic smoothing of ``1{x > t}``."""

    def d(x):
        s = expit((x - t) / eps)
        return s * (1 - s) / eps

    return TestFunction("sigmoid", lambda x: expit((x - t) / eps), d, 1.0, lipschitz=0.25 / eps)


def identity() -> TestFunction:
    """Unbounded; only for closed-form checks (``f' = 1`` for the unit OU)."""
    return TestFunction("identity", lambda x: np.array(x, dtype=float), np.ones_like, float("inf"), lipschitz=1.0)


FAMILY: dict[str, Callable[[], TestFunction]] = {
    "const": constant,
    "clip": clipped_identity,
    "tanh": tanh_fn,
    "cos": cos_fn,
    "sigmoid": smoothed_indicator,
}

ALL_FUNCTIONS = {**FAMILY, "identity": identity}


def get(name: str) -> TestFunction:
    try:
        return ALL_FUNCTIONS[name]()
    except KeyError:
        raise KeyError(f"unknown test function {name!r}; choose from {sorted(ALL_FUNCTIONS)}") from None
