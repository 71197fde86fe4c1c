"""Built-in closed loops with hand-derived certificates and observability maps.

linear_detectable
    plant ``dx_p = u``, ``y = x_p``; controller ``dx_c = y``, ``u = -y - x_c``.
loss_of_excitation
    plant ``dx_p = -x_p + u``; controller ``dx_c = -eps_c x_c``,
    ``u = (x_c - 1) y``. With ``x_p(0) = 0`` the output stays at zero and the
    controller state never shows up in it; elsewhere it shows up only at
    rate ``eps_c``. A constant probe ``y* = ybar`` makes ``x_c`` visible in
    the first output derivative.
cubic_damped
    plant ``dx_p = -x_p + u``; controller ``dx_c = -x_c^3 + y``, ``u = -x_c``.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .analysis import LyapunovCertificate, quadratic_certificate
from .detectable import LinearClosedLoop
from .dynamics import ClosedLoopSystem, ControllerModel, PlantModel
from .errors import CertificateDomainError, ConfigError
from .highgain import ObservabilityMap, solve_lyapunov
from .kfunctions import KFunction, linear
from .probing import constant_probe

EPS_C = 0.01
LOE_XC_MAX = 1.5


@dataclass(frozen=True)
class Scenario:
    """A closed loop plus everything the attack pipeline needs to run on it.

    ``probing(level)`` returns the probe signal and matching observability
    map; ``certificate(delta_x, R_m)`` returns the Lyapunov certificate at
    level ``alpha1(delta_x)``.
    """

    name: str
    system: ClosedLoopSystem
    certificate: Callable[[float, float], LyapunovCertificate]
    q: int = 1
    probing: Optional[Callable[[float], tuple]] = None
    linear: Optional[LinearClosedLoop] = None
    injection: Optional[Callable] = None
    accept: Optional[Callable] = None
    defaults: dict = field(default_factory=dict)


def linear_lift(A, B, C, q: int):
    """Output derivatives and their inverse for ``dx = A x + B y*``, ``y = C x``.

    Returns ``(lie_h, psi, rho_gain)`` where ``rho_gain`` is the infinity
    norm of the left inverse of the stacked observability matrix.
    """
    A, B, C = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, C))
    n_y = C.shape[0]
    powers = [np.eye(A.shape[0])]
    for _ in range(q + 1):
        powers.append(powers[-1] @ A)
    O = np.vstack([C @ powers[i] for i in range(q + 1)])
    if np.linalg.matrix_rank(O) < A.shape[0]:
        raise ValueError("stacked output derivatives do not determine the state")
    O_pinv = np.linalg.pinv(O)

    def lie_h(x, ystar, i):
        out = C @ powers[i] @ x
        for j in range(i):
            out = out + C @ powers[i - 1 - j] @ B @ ystar[j * n_y:(j + 1) * n_y]
        return out

    def forced(ystar):
        return np.concatenate([lie_h(np.zeros(A.shape[0]), ystar, i) for i in range(q + 1)])

    def psi(Y, ystar):
        return O_pinv @ (Y - forced(ystar))

    return lie_h, psi, float(np.max(np.sum(np.abs(O_pinv), axis=1)))


# --- linear_detectable ------------------------------------------------------------

def _linear_detectable() -> Scenario:
    A = np.array([[0.0, -1.0], [0.0, 0.0]])
    B = np.array([[-1.0], [1.0]])
    C = np.array([[1.0, 0.0]])
    lin = LinearClosedLoop(A, B, C, n_p=1)
    lie_h, psi, gain = linear_lift(A, B, C, 1)
    plant = PlantModel(1, 1, 1, f_p=lambda xp, u: np.array([u[0]]), h=lambda xp: np.array([xp[0]]), lie_h=lie_h)
    ctrl = ControllerModel(1, f_c=lambda xc, y: np.array([y[0]]), kappa=lambda xc, y: np.array([-y[0] - xc[0]]))
    system = ClosedLoopSystem(plant, ctrl)
    P = solve_lyapunov(lin.A_cl, 1.0)

    def certificate(delta_x, R_m):
        return quadratic_certificate(P, delta_x, R_m, A_cl=lin.A_cl, label="x^T P x, P A_cl + A_cl^T P = -I")

    def probing(level):
        return constant_probe(level), ObservabilityMap(1, psi, linear(gain))

    defaults = dict(mode="passive", duration=10.0, h_step=0.01, tolerance=1e-6, probe_level=1.0,
                    T=0.05, t_star=0.01, fit_horizon=10.0)
    return Scenario("linear_detectable", system, certificate, 1, probing, lin, defaults=defaults)


# --- loss_of_excitation ----------------------------------------------------------

def loe_lie_h(x, ystar, i, eps_c=EPS_C):
    xp, xc = x[0], x[1]
    y0 = ystar[0]
    if i == 0:
        return np.array([xp])
    if i == 1:
        return np.array([-xp + (xc - 1.0) * y0])
    if i == 2:
        y1 = ystar[1] if len(ystar) > 1 else 0.0
        return np.array([xp - (xc - 1.0) * y0 - eps_c * xc * y0 + (xc - 1.0) * y1])
    raise ValueError("derivative order above 2 not provided")


def _loss_of_excitation() -> Scenario:
    eps_c = EPS_C
    plant = PlantModel(1, 1, 1, f_p=lambda xp, u: np.array([-xp[0] + u[0]]), h=lambda xp: np.array([xp[0]]),
                       lie_h=loe_lie_h)
    ctrl = ControllerModel(1, f_c=lambda xc, y: np.array([-eps_c * xc[0]]),
                           kappa=lambda xc, y: np.array([(xc[0] - 1.0) * y[0]]))
    system = ClosedLoopSystem(plant, ctrl)

    def certificate(delta_x, R_m):
        cert = quadratic_certificate(np.eye(2), delta_x, R_m, alpha3=linear(2.0 * eps_c),
                                     label="x_p^2 + x_c^2")
        if cert.box_radius > LOE_XC_MAX:
            raise CertificateDomainError(
                f"certificate needs x_c <= {LOE_XC_MAX}; alpha1^-1(R + R_m) = {cert.box_radius:.4g}")
        return cert

    def probing(level):
        if level == 0:
            raise ConfigError("loss_of_excitation needs a nonzero probe level", field="probe_level")

        def psi(Y, ystar):
            return np.array([Y[0], (Y[1] + Y[0] + ystar[0]) / ystar[0]])

        return constant_probe(level), ObservabilityMap(1, psi, linear(max(1.0, 2.0 / abs(level))))

    def injection(v):
        return np.array([2.0 * v[0], 0.0])

    defaults = dict(mode="probing", probe_level=1.0, k_xtilde=0.05, eps_xtilde=0.1, eps_y=0.01, sigma=0.45,
                    r=0.5, R_m=0.5, nu=1.0, T=0.05, t_star=0.01, theta="auto", h_step=0.001, periods=10,
                    fit_horizon=20.0, duration=10.0, tolerance=1e-6)
    return Scenario("loss_of_excitation", system, certificate, 1, probing, injection=injection,
                    accept=lambda x: x[1] <= LOE_XC_MAX, defaults=defaults)


# --- cubic_damped ----------------------------------------------------------------

def cubic_lie_h(x, ystar, i):
    xp, xc = x[0], x[1]
    if i == 0:
        return np.array([xp])
    if i == 1:
        return np.array([-xp - xc])
    if i == 2:
        return np.array([xp + xc + xc**3 - ystar[0]])
    raise ValueError("derivative order above 2 not provided")


def _cubic_alpha3(v):
    # min of 2 x_p^2 + 2 x_c^4 over x_p^2 + x_c^2 = v
    return 2.0 * v * v if v <= 0.5 else 2.0 * v - 0.5


def _cubic_damped() -> Scenario:
    plant = PlantModel(1, 1, 1, f_p=lambda xp, u: np.array([-xp[0] + u[0]]), h=lambda xp: np.array([xp[0]]),
                       lie_h=cubic_lie_h)
    ctrl = ControllerModel(1, f_c=lambda xc, y: np.array([-xc[0] ** 3 + y[0]]),
                           kappa=lambda xc, y: np.array([-xc[0]]))
    system = ClosedLoopSystem(plant, ctrl)

    def certificate(delta_x, R_m):
        return quadratic_certificate(np.eye(2), delta_x, R_m, alpha3=KFunction(_cubic_alpha3, "2v^2 | 2v-1/2"),
                                     label="x_p^2 + x_c^2")

    def probing(level):
        def psi(Y, ystar):
            return np.array([Y[0], -Y[0] - Y[1]])

        return constant_probe(level), ObservabilityMap(1, psi, linear(2.0))

    defaults = dict(mode="probing", probe_level=0.5, k_xtilde=0.05, eps_xtilde=0.1, eps_y=0.01, sigma=0.45,
                    r=0.5, R_m=0.5, nu=1.0, T=0.05, t_star=0.01, theta="auto", h_step=0.001, periods=10,
                    fit_horizon=15.0, duration=10.0, tolerance=1e-6)
    return Scenario("cubic_damped", system, certificate, 1, probing, defaults=defaults)


_BUILDERS = {
    "linear_detectable": _linear_detectable,
    "loss_of_excitation": _loss_of_excitation,
    "cubic_damped": _cubic_damped,
}


def builtin_systems() -> dict:
    """Name -> :class:`Scenario` for every built-in closed loop."""
    return {name: build() for name, build in _BUILDERS.items()}


def get_scenario(ref: str) -> Scenario:
    """Built-in name, or ``package.module:attribute`` naming a Scenario (or a factory)."""
    if ref in _BUILDERS:
        return _BUILDERS[ref]()
    if ":" in ref:
        mod_name, _, attr = ref.partition(":")
        try:
            obj = getattr(importlib.import_module(mod_name), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot load system {ref!r}: {exc}", field="system") from exc
        obj = obj() if callable(obj) and not isinstance(obj, Scenario) else obj
        if not isinstance(obj, Scenario):
            raise ConfigError(f"{ref!r} did not produce a Scenario", field="system")
        return obj
    raise ConfigError(f"unknown system {ref!r}; built-ins are {sorted(_BUILDERS)}", field="system")
