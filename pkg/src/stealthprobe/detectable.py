"""Passive estimation when the closed loop is detectable.

The observer is a copy of the closed-loop field driven by the measured
output plus an output-injection correction ``l(y - yhat)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.signal import place_poles

from .dynamics import (NON_PROBING, AttackChannel, ClosedLoopSystem, SimulationTrace, closed_loop_field,
                       integrate)
from .errors import DesignError, StealthProbeError

PBH_TOL = 1e-9


@dataclass(frozen=True)
class LinearClosedLoop:
    """``dx = A x + B y``, ``y = [C_p 0] x``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    n_p: Optional[int] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", np.atleast_2d(np.asarray(self.B, dtype=float)))
        object.__setattr__(self, "C", C)
        if self.n_p is not None and np.any(C[:, self.n_p:] != 0):
            raise ValueError("output matrix must vanish on controller states")

    @property
    def A_cl(self) -> np.ndarray:
        """Autonomous closed-loop matrix ``A + B C``."""
        return self.A + self.B @ self.C


@dataclass(frozen=True)
class DetectabilityResult:
    detectable: bool
    unobservable: list

    def __bool__(self):
        return self.detectable


def check_detectability(A, C, tol: float = PBH_TOL) -> DetectabilityResult:
    """PBH test: every unobservable eigenvalue must have negative real part.

    An eigenvalue counts as unobservable when the smallest singular value of
    ``[A - lam I; C]`` is below ``tol * max(1, |A|)``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n) or C.shape[1] != n:
        raise ValueError("A must be square and C must have as many columns as A")
    try:
        eigs = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as exc:
        raise StealthProbeError(f"eigenvalue computation failed: {exc}") from exc
    scale = max(1.0, float(np.max(np.sum(np.abs(A), axis=1))))
    unobservable = []
    for lam in eigs:
        pencil = np.vstack((A - lam * np.eye(n), C))
        smin = np.linalg.svd(pencil, compute_uv=False)[-1]
        if smin < tol * scale:
            unobservable.append(complex(lam))
    bad = [lam for lam in unobservable if lam.real >= 0]
    return DetectabilityResult(not bad, unobservable)


def observability_matrix(A, C, steps: Optional[int] = None) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    steps = A.shape[0] if steps is None else steps
    blocks, M = [], C
    for _ in range(steps):
        blocks.append(M)
        M = M @ A
    return np.vstack(blocks)


def luenberger_gain(A, C, desired_poles) -> np.ndarray:
    """Gain ``L`` placing the eigenvalues of ``A - L C``.

    Single-output pairs use Ackermann's formula on the dual system;
    multi-output pairs go through ``scipy.signal.place_poles``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    poles = np.asarray(desired_poles, dtype=complex)
    n = A.shape[0]
    if poles.size != n:
        raise DesignError(f"need {n} poles, got {poles.size}")
    if np.any(poles.real >= 0):
        raise DesignError("desired poles must have negative real part")
    if not np.allclose(np.sort_complex(poles), np.sort_complex(poles.conj())):
        raise DesignError("desired poles must be closed under conjugation")
    if C.shape[0] == 1:
        O = observability_matrix(A, C)
        if np.linalg.matrix_rank(O) < n:
            raise DesignError("pair (A, C) is not observable")
        coeffs = np.real(np.poly(poles))
        phi = np.zeros_like(A)
        Ak = np.eye(n)
        for c in coeffs[::-1]:
            phi += c * Ak
            Ak = Ak @ A
        e_n = np.zeros((n, 1))
        e_n[-1, 0] = 1.0
        L = phi @ np.linalg.solve(O, e_n)
    else:
        if np.linalg.matrix_rank(observability_matrix(A, C)) < n:
            raise DesignError("pair (A, C) is not observable")
        try:
            L = place_poles(A.T, C.T, poles).gain_matrix.T
        except ValueError as exc:
            raise DesignError(str(exc)) from exc
    placed = np.linalg.eigvals(A - L @ C)
    if not _same_spectrum(placed, poles, 1e-6):
        raise DesignError("pole placement did not reach the requested spectrum")
    return L


def _same_spectrum(a, b, tol) -> bool:
    a, b = list(np.asarray(a, complex)), list(np.asarray(b, complex))
    for lam in a:
        j = int(np.argmin([abs(lam - m) for m in b]))
        if abs(lam - b[j]) > tol * max(1.0, abs(lam)):
            return False
        b.pop(j)
    return True


def default_poles(A) -> np.ndarray:
    """Eigenvalues of ``A`` pushed left by three times the slowest stable decay rate."""
    eigs = np.linalg.eigvals(np.atleast_2d(np.asarray(A, dtype=float)))
    stable = [-lam.real for lam in eigs if lam.real < 0]
    shift = 3.0 * (min(stable) if stable else 1.0)
    out = np.array([-abs(lam.real) - shift + 1j * lam.imag for lam in eigs])
    # keep the set self-conjugate after rounding
    return np.where(np.abs(out.imag) < 1e-12, out.real, out)


@dataclass(frozen=True)
class ISSObserver:
    """``dxhat = f(xhat, y) + l(y - h(xhat_p))``."""

    system: ClosedLoopSystem
    injection: Callable

    def __post_init__(self):
        zero = np.asarray(self.injection(np.zeros(self.system.plant.n_y)), dtype=float)
        if zero.shape != (self.system.n,) or np.any(zero != 0):
            raise DesignError("injection map must return a zero vector of state size at zero")

    def rhs(self, xhat, y) -> np.ndarray:
        yhat = self.system.output(xhat)
        return closed_loop_field(self.system, xhat, y) + np.asarray(self.injection(y - yhat), dtype=float)


def linear_observer(system: ClosedLoopSystem, L) -> ISSObserver:
    L = np.atleast_2d(np.asarray(L, dtype=float))
    return ISSObserver(system, lambda v: L @ np.atleast_1d(v))


def run_passive_estimation(system: ClosedLoopSystem, observer: ISSObserver, x0, xhat0, horizon: float,
                           h_step: float, channel: Optional[AttackChannel] = None) -> SimulationTrace:
    """Co-simulate the loop and a silent observer reading the sensor.

    The loop sees ``y = h(x_p) + a(t)``; with a silent channel nothing is
    written back, so the plant/controller trajectory is exactly the
    observer-free one.
    """
    n, n_p, n_y = system.n, system.plant.n_p, system.plant.n_y
    channel = channel or AttackChannel()
    silent = channel.mode == "silent"

    def measured(x, t):
        y = system.plant.h(x[:n_p])
        return y if silent else np.atleast_1d(y) + channel(t, n_y)

    def field(z, t):
        x, xh = z[:n], z[n:]
        y = measured(x, t)
        return np.concatenate((closed_loop_field(system, x, y), observer.rhs(xh, y)))

    z0 = np.concatenate((np.asarray(x0, float), np.asarray(xhat0, float)))
    raw = integrate(field, z0, 0.0, horizon, h_step)
    x, xh = raw.x[:, :n], raw.x[:, n:]
    a = np.array([channel(t, n_y) for t in raw.t])
    y = np.array([system.output(xi) for xi in x]) + a
    trace = SimulationTrace(t=raw.t, x=x, y=y, a=a, mode=[NON_PROBING] * len(raw.t), xhat=xh,
                            xhat_held=xh.copy())
    trace.meta["error_norm"] = np.max(np.abs(xh - x), axis=1)
    return trace
