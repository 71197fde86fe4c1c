"""High-gain estimator of the output-derivative stack used while probing.

The estimator state ``Yhat`` approximates ``Y = (h, Lh, ..., L^q h)`` in
blocks of size ``n_y``. It runs during probe windows and is frozen
otherwise; the full closed-loop state is read back through an
observability map ``Psi(Y, Y*)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import comb

from .errors import DesignError, EstimatorDivergenceError, InfeasibleError, ReconstructionError
from .kfunctions import KFunction

THETA_GRID_MAX_EXP = 60


def hurwitz_coefficients(q: int) -> tuple:
    """Binomial coefficients of ``(s + 1)^(q+1)`` without the leading 1."""
    if q < 1:
        raise ValueError("q must be >= 1")
    return tuple(int(comb(q + 1, i, exact=True)) for i in range(1, q + 2))


def is_hurwitz_poly(coeffs) -> bool:
    roots = np.roots(np.concatenate(([1.0], np.asarray(coeffs, dtype=float))))
    return bool(np.all(roots.real < 0))


@dataclass(frozen=True)
class LiftedMatrices:
    q: int
    n_y: int
    A: np.ndarray
    C: np.ndarray
    H: np.ndarray
    Delta: np.ndarray
    Delta_inv: np.ndarray
    theta: float
    coeffs: tuple

    @property
    def dim(self) -> int:
        return (self.q + 1) * self.n_y

    @property
    def M(self) -> np.ndarray:
        """``A - H C``, Hurwitz by construction."""
        return self.A - self.H @ self.C

    def gain(self) -> np.ndarray:
        """``theta * Delta_theta * H``."""
        return self.theta * (self.Delta @ self.H)


def build_matrices(q: int, n_y: int, coeffs=None, theta: float = 1.0) -> LiftedMatrices:
    if coeffs is None:
        coeffs = hurwitz_coefficients(q)
    coeffs = tuple(coeffs)
    if len(coeffs) != q + 1:
        raise DesignError(f"need {q + 1} coefficients, got {len(coeffs)}")
    if not is_hurwitz_poly(coeffs):
        raise DesignError(f"coefficients {coeffs} do not give a Hurwitz polynomial")
    if theta < 1:
        raise DesignError("theta must be >= 1")
    dim = (q + 1) * n_y
    I = np.eye(n_y)
    A = np.zeros((dim, dim))
    A[: q * n_y, n_y:] = np.eye(q * n_y)
    C = np.zeros((n_y, dim))
    C[:, :n_y] = I
    H = np.vstack([a * I for a in coeffs])
    powers = np.repeat([float(theta) ** i for i in range(q + 1)], n_y)
    Delta = np.diag(powers)
    Delta_inv = np.diag(1.0 / powers)
    return LiftedMatrices(q, n_y, A, C, H, Delta, Delta_inv, float(theta), coeffs)


def solve_lyapunov(M, nu: float = 1.0) -> np.ndarray:
    """Symmetric ``P > 0`` with ``P M + M^T P = -nu I``.

    Solved as a linear system in the entries of ``P``.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    n = M.shape[0]
    if nu <= 0:
        raise DesignError("nu must be positive")
    if np.max(np.linalg.eigvals(M).real) >= 0:
        raise DesignError("matrix is not Hurwitz")
    I = np.eye(n)
    # row-major vec: vec(P M) = (I kron M^T) vec(P), vec(M^T P) = (M^T kron I) vec(P)
    K = np.kron(I, M.T) + np.kron(M.T, I)
    P = np.linalg.solve(K, -nu * I.reshape(-1)).reshape(n, n)
    P = 0.5 * (P + P.T)
    if np.min(np.linalg.eigvalsh(P)) <= 0:
        raise DesignError("Lyapunov solution is not positive definite")
    return P


def lyapunov_residual_max(P, M, nu: float) -> float:
    """Largest eigenvalue of ``P M + M^T P + nu I`` (should be <= 0)."""
    R = P @ M + M.T @ P + nu * np.eye(M.shape[0])
    return float(np.max(np.linalg.eigvalsh(0.5 * (R + R.T))))


@dataclass(frozen=True)
class ThetaSelection:
    theta: float
    audit: dict


def _theta_terms(theta, t_star, delta_e0, K_inv, lam_max, lam_min, nu, phi_bar, q):
    c = math.sqrt(lam_max / lam_min)
    conv_lhs = math.exp(-theta * nu * t_star / (4 * lam_min)) * delta_e0
    conv_rhs = 4 * lam_max * phi_bar / (theta ** (q - 1) * nu)
    acc_lhs = c * 4 * lam_max * phi_bar / (theta * nu)
    acc_rhs = K_inv
    return {
        "theta": theta,
        "theta_convergence": {"lhs": conv_lhs, "rhs": conv_rhs, "holds": conv_lhs <= conv_rhs},
        "theta_accuracy": {"lhs": acc_lhs, "rhs": acc_rhs, "holds": acc_lhs <= acc_rhs},
    }


def select_theta(t_star: float, delta_e0: float, K_xtilde: float, rho_psi: KFunction, P, nu: float,
                 phi_bar: float, q: int, theta_max: float = 2.0 ** THETA_GRID_MAX_EXP) -> ThetaSelection:
    """Smallest power-of-two gain meeting both the convergence and accuracy tests.

    Convergence: ``exp(-theta nu t*/(4 lam_min)) De0 <= 4 lam_max phi/(theta^(q-1) nu)``.
    Accuracy: ``c 4 lam_max phi/(theta nu) <= rho_psi^-1(K)`` with ``c = sqrt(lam_max/lam_min)``.
    """
    for name, v in (("t_star", t_star), ("delta_e0", delta_e0), ("K_xtilde", K_xtilde), ("nu", nu),
                    ("phi_bar", phi_bar)):
        if not v > 0:
            raise ValueError(f"{name} must be positive")
    ev = np.linalg.eigvalsh(np.asarray(P, dtype=float))
    lam_min, lam_max = float(ev[0]), float(ev[-1])
    K_inv = rho_psi.inv(K_xtilde)
    args = (t_star, delta_e0, K_inv, lam_max, lam_min, nu, phi_bar, q)
    last = None
    for j in range(THETA_GRID_MAX_EXP + 1):
        theta = 2.0 ** j
        if theta > theta_max:
            break
        terms = _theta_terms(theta, *args)
        last = terms
        if terms["theta_convergence"]["holds"] and terms["theta_accuracy"]["holds"]:
            audit = {
                "lambda_min_P": lam_min,
                "lambda_max_P": lam_max,
                "c": math.sqrt(lam_max / lam_min),
                "rho_psi_inv_K": K_inv,
                "chosen": terms,
                "half": _theta_terms(theta / 2, *args) if j > 0 else None,
            }
            return ThetaSelection(theta, audit)
    failing = [name for name in ("theta_accuracy", "theta_convergence") if last and not last[name]["holds"]]
    binding = failing[0] if failing else "theta_accuracy"
    raise InfeasibleError(
        f"no theta <= {theta_max:.6g} satisfies the gain conditions ({', '.join(failing)} fails)",
        binding=binding,
        audit={"largest_theta_tried": last, "theta_max": theta_max, "lambda_min_P": lam_min,
               "lambda_max_P": lam_max, "rho_psi_inv_K": K_inv},
    )


def initialize_observer(y_meas, q: int, eps_y: float) -> np.ndarray:
    """Seed with the current measurement in the first block, zeros above.

    Any first block within ``eps_y`` of the measurement is admissible; the
    measurement itself is the centre of that set.
    """
    if not eps_y > 0:
        raise ValueError("eps_y must be positive")
    y = np.atleast_1d(np.asarray(y_meas, dtype=float))
    return np.concatenate((y, np.zeros(q * y.size)))


def init_diameter(eps_y: float, H_q: float) -> float:
    """Diameter bound of the admissible initialisation set, ``2 max(eps_y, H_q)``."""
    return 2.0 * max(eps_y, H_q)


def observer_rhs(Yhat, mats: LiftedMatrices, y_true) -> np.ndarray:
    innovation = np.atleast_1d(y_true) - mats.C @ Yhat
    return mats.A @ Yhat + mats.gain() @ innovation


def observer_step(Yhat, mats: LiftedMatrices, y_true, probing: bool, h_step: float) -> np.ndarray:
    """One RK4 step of the estimator; exact hold when not probing.

    ``y_true`` may be a vector (held over the step) or a callable of the
    offset within the step.
    """
    Yhat = np.asarray(Yhat, dtype=float)
    if not probing:
        return Yhat.copy()
    y_at = y_true if callable(y_true) else (lambda s: y_true)
    G = mats.gain()
    CA = mats.C

    def f(Y, s):
        return mats.A @ Y + G @ (np.atleast_1d(y_at(s)) - CA @ Y)

    h = h_step
    k1 = f(Yhat, 0.0)
    k2 = f(Yhat + 0.5 * h * k1, 0.5 * h)
    k3 = f(Yhat + 0.5 * h * k2, 0.5 * h)
    k4 = f(Yhat + h * k3, h)
    out = Yhat + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise EstimatorDivergenceError("estimator diverged; reduce h_step relative to 1/theta")
    return out


@dataclass(frozen=True)
class ObservabilityMap:
    """``x = Psi(Y, Y*)`` with modulus ``rho_psi`` on the operating compact."""

    q: int
    psi: Callable
    rho_psi: KFunction


def reconstruct(Yhat, Y_star, omap: ObservabilityMap) -> np.ndarray:
    try:
        with np.errstate(divide="raise", invalid="raise", over="raise"):
            x = np.asarray(omap.psi(np.asarray(Yhat, dtype=float), np.asarray(Y_star, dtype=float)), dtype=float)
    except (ZeroDivisionError, FloatingPointError) as exc:
        raise ReconstructionError(f"observability map failed: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise ReconstructionError("observability map returned non-finite state")
    return x


def rescale_error(e, theta: float, q: int, n_y: int) -> np.ndarray:
    """``z = Delta_theta^-1 e``; block i is divided by ``theta^i``."""
    e = np.asarray(e, dtype=float)
    scale = np.repeat([float(theta) ** i for i in range(q + 1)], n_y)
    return e / scale
