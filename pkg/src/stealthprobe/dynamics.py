"""Plant/controller models, the attack channel and a fixed-step RK4 integrator.

All norms are infinity norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import FiniteEscapeError, ModelEvaluationError

ESCAPE_BOUND = 1e9

PROBING = "probing"
NON_PROBING = "non-probing"


def inf_norm(v) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.max(np.abs(v))) if v.size else 0.0


def _vec(value, name, size=None):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if size is not None and arr.shape != (size,):
        raise ModelEvaluationError(name, f"{name} returned shape {arr.shape}, expected ({size},)")
    if not np.all(np.isfinite(arr)):
        raise ModelEvaluationError(name)
    return arr


@dataclass(frozen=True)
class PlantModel:
    """Plant ``dx_p = f_p(x_p, u)``, sensor ``y = h(x_p)``.

    ``lie_h(x, ystar_stack, i)`` gives the i-th time derivative of the output
    along the probed closed loop. It takes the full closed-loop state and the
    probe derivative stack because those derivatives generally involve the
    controller state and the injected signal.
    """

    n_p: int
    n_u: int
    n_y: int
    f_p: Callable
    h: Callable
    lie_h: Optional[Callable] = None


@dataclass(frozen=True)
class ControllerModel:
    n_c: int
    f_c: Callable
    kappa: Callable


@dataclass(frozen=True)
class AttackChannel:
    """Additive output corruption ``y = h(x_p) + a(t)``."""

    a: Optional[Callable] = None
    mode: str = "silent"

    def __post_init__(self):
        if self.mode not in ("silent", "probing-override"):
            raise ValueError(f"unknown attack mode {self.mode!r}")

    def __call__(self, t: float, n_y: int) -> np.ndarray:
        if self.mode == "silent" or self.a is None:
            return np.zeros(n_y)
        return np.atleast_1d(np.asarray(self.a(t), dtype=float))


@dataclass(frozen=True)
class ClosedLoopSystem:
    plant: PlantModel
    controller: ControllerModel

    @property
    def n(self) -> int:
        return self.plant.n_p + self.controller.n_c

    def split(self, x):
        return x[: self.plant.n_p], x[self.plant.n_p:]

    def output(self, x) -> np.ndarray:
        return _vec(self.plant.h(x[: self.plant.n_p]), "h", self.plant.n_y)


def closed_loop_field(sys: ClosedLoopSystem, x, y) -> np.ndarray:
    """Stacked vector field ``(f_p(x_p, kappa(x_c, y)), f_c(x_c, y))``."""
    p, c = sys.plant, sys.controller
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.n,):
        raise ModelEvaluationError("closed_loop_field", f"state has shape {x.shape}, expected ({sys.n},)")
    xp, xc = x[: p.n_p], x[p.n_p:]
    y = np.atleast_1d(np.asarray(y, dtype=float))
    u = _vec(c.kappa(xc, y), "kappa", p.n_u)
    dxp = _vec(p.f_p(xp, u), "f_p", p.n_p)
    if c.n_c == 0:
        return dxp
    dxc = _vec(c.f_c(xc, y), "f_c", c.n_c)
    return np.concatenate((dxp, dxc))


def effective_output(plant: PlantModel, x_p, t: float, schedule, probe) -> np.ndarray:
    """Sensor value seen by the controller under the dual-mode schedule."""
    from .probing import classify

    mode, _, offset = classify(t, schedule)
    if mode == PROBING:
        return np.atleast_1d(np.asarray(probe.value(offset), dtype=float))
    return _vec(plant.h(x_p), "h", plant.n_y)


def probed_field(sys: ClosedLoopSystem, x, t: float, schedule, probe) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = effective_output(sys.plant, x[: sys.plant.n_p], t, schedule, probe)
    return closed_loop_field(sys, x, y)


def unprobed_field(sys: ClosedLoopSystem):
    """``(x, t) -> f(x, h(x_p))`` for use with :func:`integrate`."""
    n_p = sys.plant.n_p

    def field(x, t):
        return closed_loop_field(sys, x, sys.plant.h(x[:n_p]))

    return field


@dataclass
class SimulationTrace:
    """Uniform-grid trajectory record.

    Only ``t`` and ``x`` are mandatory; simulations fill in the rest.
    ``xhat_held`` is the estimate carried into each instant from the left,
    which differs from ``xhat`` only where the observer was re-initialised.
    """

    t: np.ndarray
    x: np.ndarray
    y: Optional[np.ndarray] = None
    a: Optional[np.ndarray] = None
    mode: Optional[list] = None
    Yhat: Optional[np.ndarray] = None
    xhat: Optional[np.ndarray] = None
    xhat_held: Optional[np.ndarray] = None
    escape_time: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @property
    def h_step(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0

    def state_norms(self) -> np.ndarray:
        return np.max(np.abs(self.x), axis=1)

    def index_of(self, time: float) -> int:
        i = int(round((time - self.t[0]) / self.h_step))
        if i < 0 or i >= len(self.t) or abs(self.t[i] - time) > 1e-9 * max(1.0, abs(time)):
            raise ValueError(f"t={time} is not a grid point of this trace")
        return i

    def check(self):
        n = len(self.t)
        if n > 1:
            dt = np.diff(self.t)
            if np.any(dt <= 0) or np.max(np.abs(dt - dt[0])) > 1e-9 * max(1.0, abs(self.t[-1])):
                raise ValueError("time grid must be strictly increasing with constant step")
        for name in ("x", "y", "a", "Yhat", "xhat", "xhat_held", "mode"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ValueError(f"series {name} has length {len(v)}, expected {n}")


def grid_steps(t0: float, t1: float, h_step: float) -> int:
    if not t1 > t0:
        raise ValueError("integration needs t1 > t0")
    if not h_step > 0:
        raise ValueError("h_step must be positive")
    n = int(round((t1 - t0) / h_step))
    if n < 1 or abs(n * h_step - (t1 - t0)) > 1e-9 * max(1.0, abs(t1 - t0)):
        raise ValueError(f"h_step={h_step} does not divide [{t0}, {t1}]")
    return n


def integrate(field: Callable, x0, t0: float, t1: float, h_step: float,
              escape_bound: float = ESCAPE_BOUND) -> SimulationTrace:
    """Classical RK4 on a uniform grid covering ``[t0, t1]`` inclusive.

    Increments are accumulated with compensated summation so long runs at
    tiny steps do not drift from rounding.
    """
    n = grid_steps(t0, t1, h_step)
    h = (t1 - t0) / n
    x = np.array(x0, dtype=float)
    xs = np.empty((n + 1, x.size))
    ts = t0 + h * np.arange(n + 1)
    ts[-1] = t1
    xs[0] = x
    comp = np.zeros_like(x)
    half = 0.5 * h
    for i in range(n):
        t = ts[i]
        k1 = field(x, t)
        k2 = field(x + half * k1, t + half)
        k3 = field(x + half * k2, t + half)
        k4 = field(x + h * k3, t + h)
        dx = (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4) - comp
        x_new = x + dx
        comp = (x_new - x) - dx
        x = x_new
        xs[i + 1] = x
        if not np.all(np.isfinite(x)) or inf_norm(x) > escape_bound:
            partial = SimulationTrace(t=ts[: i + 2].copy(), x=xs[: i + 2].copy(), escape_time=float(ts[i + 1]))
            raise FiniteEscapeError(float(ts[i + 1]), partial)
    return SimulationTrace(t=ts, x=xs)


def simulate_closed_loop(sys: ClosedLoopSystem, x0, horizon: float, h_step: float,
                         escape_bound: float = ESCAPE_BOUND) -> SimulationTrace:
    """Unattacked closed loop from ``x0`` over ``[0, horizon]``."""
    trace = integrate(unprobed_field(sys), x0, 0.0, horizon, h_step, escape_bound)
    trace.y = np.array([sys.output(x) for x in trace.x])
    trace.a = np.zeros_like(trace.y)
    trace.mode = [NON_PROBING] * len(trace.t)
    return trace

