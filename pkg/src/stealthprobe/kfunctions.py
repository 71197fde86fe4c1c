"""Comparison functions as monotone scalar callables with numeric inverses."""

import math
from dataclasses import dataclass
from typing import Callable

UPPER = 1e12
RTOL = 1e-12


def invert(fn: Callable[[float], float], value: float, upper: float = UPPER, rtol: float = RTOL) -> float:
    """Bisection inverse of a nondecreasing ``fn`` with ``fn(0) = 0`` on ``[0, upper]``.

    Returns ``inf`` when ``value`` exceeds ``fn(upper)``, which is how a
    relaxed bound (e.g. an infinite tolerance) propagates.
    """
    if value <= 0.0:
        return 0.0
    if math.isinf(value) or value > fn(upper):
        return math.inf
    lo, hi = 0.0, upper
    while hi - lo > rtol * max(hi, 1e-300):
        mid = 0.5 * (lo + hi)
        if fn(mid) < value:
            lo = mid
        else:
            hi = mid
        if hi <= 5e-324:
            break
    return hi


@dataclass(frozen=True)
class KFunction:
    """Class-K (or K-infinity) function ``fn`` with a bisection inverse."""

    fn: Callable[[float], float]
    label: str = ""

    def __call__(self, r: float) -> float:
        return float(self.fn(r))

    def inv(self, value: float) -> float:
        return invert(self.fn, value)


def linear(gain: float, label: str = "") -> KFunction:
    return KFunction(lambda r: gain * r, label or f"{gain:g}*r")


@dataclass(frozen=True)
class ExpKL:
    """Exponential KL surrogate ``c1 * r * exp(-c2 * s)``.

    ``c2 = inf`` is the sentinel for an ensemble already at the origin.
    """

    c1: float
    c2: float

    def __call__(self, r: float, s: float) -> float:
        if math.isinf(self.c2):
            return self.c1 * r if s <= 0 else 0.0
        return self.c1 * r * math.exp(-self.c2 * s)
