"""Dual-mode probing schedule, probe signals and schedule parameter selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import NON_PROBING, PROBING
from .errors import InfeasibleError
from .kfunctions import ExpKL

# relative slack used to snap floating-point times onto period boundaries
_SNAP = 1e-9


@dataclass(frozen=True)
class ProbingSchedule:
    """Period ``T`` split into ``[kT, kT + t_star)`` probing and the rest holding."""

    T: float
    t_star: float

    def __post_init__(self):
        if not (0.0 < self.t_star < self.T):
            raise ValueError(f"schedule needs 0 < t_star < T, got t_star={self.t_star}, T={self.T}")

    def probe_start(self, k: int) -> float:
        return k * self.T

    def probe_end(self, k: int) -> float:
        return k * self.T + self.t_star


@dataclass(frozen=True)
class ProbeSignal:
    """Open-loop signal written onto the sensor channel while probing.

    ``derivatives(s, i)`` returns the i-th derivative at offset ``s`` (i = 0
    is the signal itself). ``order`` is the declared smoothness.
    """

    derivatives: Callable[[float, int], np.ndarray]
    n_y: int = 1
    order: int = 2
    duration: float = math.inf
    label: str = ""

    def value(self, s: float) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.derivatives(s, 0), dtype=float))

    def on(self, duration: float) -> "ProbeSignal":
        return ProbeSignal(self.derivatives, self.n_y, self.order, duration, self.label)


def constant_probe(level, n_y: int = 1) -> ProbeSignal:
    level = np.broadcast_to(np.asarray(level, dtype=float), (n_y,)).copy()

    def derivs(s, i):
        return level.copy() if i == 0 else np.zeros(n_y)

    return ProbeSignal(derivs, n_y, order=10**6, label=f"constant {level.tolist()}")


def sinusoidal_probe(amplitude: float, omega: float, offset: float = 0.0, phase: float = 0.0) -> ProbeSignal:
    """``offset + amplitude * sin(omega * s + phase)``."""

    def derivs(s, i):
        v = amplitude * omega**i * math.sin(omega * s + phase + i * math.pi / 2)
        return np.array([v + (offset if i == 0 else 0.0)])

    return ProbeSignal(derivs, 1, order=10**6, label=f"sin amp={amplitude} omega={omega}")


def polynomial_probe(coeffs) -> ProbeSignal:
    """Scalar polynomial probe, ``coeffs`` in increasing powers of ``s``."""
    poly = np.polynomial.Polynomial(coeffs)

    def derivs(s, i):
        return np.array([poly.deriv(i)(s) if i else poly(s)])

    return ProbeSignal(derivs, 1, order=10**6, label=f"poly {list(coeffs)}")


def classify(t: float, schedule: ProbingSchedule):
    """Return ``(mode, k, offset)`` for time ``t``; probing intervals are right-open."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    T = schedule.T
    ratio = t / T
    k = int(round(ratio))
    if abs(ratio - k) > _SNAP * max(1.0, ratio):
        k = math.floor(ratio)
    offset = t - k * T
    if abs(offset) <= _SNAP * T:
        offset = 0.0
    if offset < schedule.t_star - _SNAP * T:
        return PROBING, k, offset
    return NON_PROBING, k, offset


def probe_derivative_stack(probe: ProbeSignal, s: float, q: int) -> np.ndarray:
    """``(y*, y*', ..., y*^(q))`` at offset ``s``, stacked."""
    if s < -_SNAP or s > probe.duration * (1 + _SNAP) + _SNAP:
        raise ValueError(f"probe offset {s} outside [0, {probe.duration}]")
    return np.concatenate([np.atleast_1d(np.asarray(probe.derivatives(s, i), dtype=float)) for i in range(q + 1)])


def _round_up(value: float, step: float) -> float:
    m = math.ceil(value / step - 1e-9)
    return m * step


def select_period(delta_x: float, eps_xtilde: float, t_star: float, beta_x: ExpKL,
                  grid_step: float | None = None) -> float:
    """Smallest ``T`` with ``beta_x(delta_x, T - t_star) <= eps_xtilde``.

    ``T`` is rounded up to the grid; rounding up keeps the inequality since
    the envelope is non-increasing in time. If the bound already holds at
    zero hold time the result is one grid step past ``t_star``.
    """
    if not beta_x.c2 > 0:
        raise InfeasibleError("fitted state envelope does not decay", binding="period_decay",
                              audit={"c1": beta_x.c1, "c2": beta_x.c2})
    if math.isinf(beta_x.c2):
        hold = 0.0
    else:
        hold = max(0.0, math.log(beta_x.c1 * delta_x / eps_xtilde) / beta_x.c2)
    T = t_star + hold
    if grid_step:
        T = _round_up(T, grid_step)
        if T <= t_star * (1 + 1e-12):
            T = t_star + grid_step
    elif hold == 0.0:
        raise InfeasibleError("hold time is zero; supply a grid step", binding="period_decay")
    return T


def probe_budget(F: float, F_star: float, t_star: float) -> float:
    """Accumulated perturbation bound ``(F + F*) t*`` over one probe window."""
    return (F + F_star) * t_star


@dataclass(frozen=True)
class StealthFeasibility:
    decay_lhs: float
    decay_rhs: float
    budget_lhs: float
    budget_rhs: float

    @property
    def decay_margin(self) -> float:
        return self.decay_rhs - self.decay_lhs

    @property
    def budget_margin(self) -> float:
        return self.budget_rhs - self.budget_lhs

    @property
    def feasible(self) -> bool:
        return self.decay_margin >= 0 and self.budget_margin >= 0

    @property
    def binding(self) -> str:
        """Constraint with the smaller margin (the violated one when infeasible)."""
        if self.budget_margin < 0 or (self.decay_margin >= 0 and self.budget_margin <= self.decay_margin):
            return "stealth_budget"
        return "stealth_decay"

    def as_dict(self) -> dict:
        return {
            "stealth_decay": {"lhs_r": self.decay_lhs, "rhs_betaV_R_tstar": self.decay_rhs,
                              "margin": self.decay_margin},
            "stealth_budget": {"lhs_probe_budget": self.budget_lhs, "rhs_rho_inv_sigma_decay": self.budget_rhs,
                               "margin": self.budget_margin},
            "feasible": self.feasible,
            "binding": self.binding,
        }


def check_stealth_feasibility(T: float, t_star: float, r: float, R: float, sigma: float,
                              F: float, F_star: float, L_bar: float, rho, beta_V) -> StealthFeasibility:
    """Margins of the two conditions that keep probing stealthy.

    ``r <= beta_V(R, t*)`` and ``(F + F*) t* <= rho^-1(sigma) exp(-L_bar T)``.
    """
    if not 0 < r < R:
        raise ValueError(f"need 0 < r < R, got r={r}, R={R}")
    if not 0 <= sigma < R - r:
        raise ValueError(f"need 0 <= sigma < R - r = {R - r}, got {sigma}")
    return StealthFeasibility(
        decay_lhs=r,
        decay_rhs=beta_V(R, t_star),
        budget_lhs=probe_budget(F, F_star, t_star),
        budget_rhs=rho.inv(sigma) * math.exp(-L_bar * T),
    )


def max_probe_duration(T: float, sigma: float, F: float, F_star: float, L_bar: float, rho) -> float:
    """Largest ``t*`` meeting the budget condition for a given ``T``."""
    return rho.inv(sigma) * math.exp(-L_bar * T) / (F + F_star)
