import math

import numpy as np
import pytest

from stealthprobe.analysis import (
    check_certificate,
    count_rho_violations,
    estimate_bound_constants,
    fit_kl_envelope,
    gronwall_check,
    induced_inf_norm,
    lyapunov_along_trace,
    quadratic_certificate,
    verify_estimation,
    verify_stealth,
)
from stealthprobe.dynamics import (
    ClosedLoopSystem,
    ControllerModel,
    PlantModel,
    SimulationTrace,
    simulate_closed_loop,
)
from stealthprobe.errors import StabilityViolationError
from stealthprobe.kfunctions import ExpKL, linear
from stealthprobe.probing import ProbingSchedule, constant_probe


def _linear_system(A, B, C):
    A, B, C = (np.atleast_2d(np.asarray(m, float)) for m in (A, B, C))
    n = A.shape[0]
    plant = PlantModel(n, 1, 1, f_p=lambda x, u: A @ x + B @ u, h=lambda x: C @ x)
    ctrl = ControllerModel(0, f_c=lambda xc, y: np.zeros(0), kappa=lambda xc, y: np.zeros(1))
    return ClosedLoopSystem(plant, ctrl)


def _identity_cert(delta_x=1.0, R_m=0.5, rate=1.0):
    return quadratic_certificate(np.eye(2), delta_x, R_m, alpha3=linear(rate))


def test_lipschitz_linear_matches_induced_norm():
    A = np.array([[-1.0, 0.5], [0.3, -2.0]])
    sys = _linear_system(A, [[0.0], [0.0]], [[1.0, 0.0]])
    c = estimate_bound_constants(sys, _identity_cert(), sample_count=1000)
    assert c.raw["l_x"] == pytest.approx(induced_inf_norm(A), rel=0.1)


def test_f_star_linear_constant_probe():
    A = np.array([[-1.0, 0.0], [0.0, -1.0]])
    Bp = np.array([[1.0], [2.0]])
    plant = PlantModel(2, 1, 1, f_p=lambda x, u: A @ x + Bp @ u, h=lambda x: x[:1])
    ctrl = ControllerModel(0, f_c=lambda xc, y: np.zeros(0), kappa=lambda xc, y: y)
    sys = ClosedLoopSystem(plant, ctrl)
    cert = _identity_cert()
    c = estimate_bound_constants(sys, cert, constant_probe(0.5), 1000, t_star=0.1)
    rng = np.random.default_rng(7)
    b = cert.box_radius
    pts = rng.uniform(-b, b, (20000, 2))
    pts = pts[np.sum(pts**2, axis=1) <= cert.R + cert.R_m]
    oracle = max(np.max(np.abs(A @ p + Bp[:, 0] * 0.5)) for p in pts)
    assert c.raw["F_star"] == pytest.approx(oracle, rel=0.1)


def test_rho_identity_quadratic_no_violations():
    cert = _identity_cert()
    assert count_rho_violations(cert, 2, samples=2000) == 0


def test_rho_for_n1_matches_scalar_form():
    cert = quadratic_certificate(np.eye(1), 1.0, 0.5, alpha3=linear(1.0))
    r = 0.3
    assert cert.rho(r) == pytest.approx(2 * math.sqrt(1.5) * r + r * r)


@pytest.mark.parametrize("name", ["linear_detectable", "loss_of_excitation", "cubic_damped"])
def test_builtin_certificates(builtins, name):
    sc = builtins[name]
    cert = sc.certificate(1.0, 0.5)
    res = check_certificate(sc.system, cert, samples=10000)
    assert res["sandwich_violations"] == 0 and res["decrease_violations"] == 0
    assert count_rho_violations(cert, 2, samples=1000) == 0


def test_fit_exact_exponential():
    t = np.linspace(0.0, 5.0, 101)
    series = np.array([r * np.exp(-t) for r in np.linspace(0.5, 1.0, 12)])
    beta = fit_kl_envelope(t, series)
    assert beta.c2 == pytest.approx(1.0, rel=0.05)
    assert all(np.all(s <= beta(s[0], 0) * np.exp(-beta.c2 * t) * (1 + 1e-12)) for s in series)


def test_fit_zero_traces_sentinel():
    beta = fit_kl_envelope(np.linspace(0, 1, 11), np.zeros((10, 11)))
    assert beta.c1 == 1.0 and math.isinf(beta.c2)


def test_fit_growing_rejected():
    t = np.linspace(0, 1, 11)
    with pytest.raises(StabilityViolationError):
        fit_kl_envelope(t, np.array([np.exp(t)] * 10))


def test_fit_example_a_dominates(builtins, rng):
    from stealthprobe.analysis import envelope_violation_mass, simulate_ensemble, sphere_points

    sc = builtins["linear_detectable"]
    t, X = simulate_ensemble(sc.system, sphere_points(2, 1.0, 20, rng), 10.0, 0.05)
    norms = np.max(np.abs(X), axis=2)
    beta = fit_kl_envelope(t, norms)
    assert envelope_violation_mass(beta, t, norms) == 0.0


def test_gronwall_zero_disturbance(builtins):
    sc = builtins["linear_detectable"]
    cert = sc.certificate(1.0, 0.5)
    rep = gronwall_check(sc.system, cert, lambda t, x: np.zeros(2), 1.0, np.array([0.3, 0.2]), 2.0,
                         ExpKL(2.0, 0.3), 0.01)
    assert rep["max_deviation"] == 0.0 and rep["passed"]


def test_gronwall_scalar_closed_form():
    plant = PlantModel(1, 1, 1, f_p=lambda x, u: -x, h=lambda x: x)
    ctrl = ControllerModel(0, f_c=lambda xc, y: np.zeros(0), kappa=lambda xc, y: np.zeros(1))
    sys = ClosedLoopSystem(plant, ctrl)
    cert = quadratic_certificate(np.eye(1), 1.0, 0.5, alpha3=linear(2.0))
    delta, T = 0.05, 1.0
    rep = gronwall_check(sys, cert, lambda t, x: np.array([delta]), T, np.array([0.5]), 1.0, ExpKL(1.0, 2.0), 1e-3)
    assert rep["max_deviation"] == pytest.approx(delta * (1 - math.exp(-T)), rel=1e-6)
    assert rep["deviation_pass"] and rep["d_bar"] == pytest.approx(delta * T)


def test_verify_stealth_trivial():
    cert = _identity_cert()
    t = np.linspace(0, 1, 11)
    x = np.column_stack((0.8 * np.exp(-t), np.zeros_like(t)))
    beta = ExpKL(1.0, 1.0)
    # K_x = alpha1^-1(beta(1, 0) + 1) = sqrt(2) here; max |x| = 0.8
    out = verify_stealth(SimulationTrace(t=t, x=x), cert, 1.0, beta)
    assert out["passed"] and out["max_norm"] == pytest.approx(0.8)
    esc = verify_stealth(SimulationTrace(t=t, x=x, escape_time=0.7), cert, 1.0, beta)
    assert not esc["passed"] and esc["escape_time"] == 0.7


def _trace_with_estimate(xhat_fn):
    t = np.round(np.arange(0, 201) * 0.01, 12)
    x = np.column_stack((0.5 * np.cos(t), 0.5 * np.sin(t)))
    xh = xhat_fn(x)
    return SimulationTrace(t=t, x=x, xhat=xh, xhat_held=xh.copy())


def test_verify_estimation_perfect():
    tr = _trace_with_estimate(lambda x: x.copy())
    out = verify_estimation(tr, 0.05, 1.0, 0.1, ProbingSchedule(0.2, 0.05), 1.0, 1.0, periods=10)
    assert out["passed"]
    assert all(r["end_of_probe_error"] == 0.0 for r in out["period_table"])


def test_verify_estimation_frozen_zero():
    tr = _trace_with_estimate(np.zeros_like)
    out = verify_estimation(tr, 0.05, 1.0, 0.1, ProbingSchedule(0.2, 0.05), 1.0, 1.0, periods=10)
    assert all(r["end_of_period_pass"] for r in out["period_table"])
    assert not any(r["end_of_probe_pass"] for r in out["period_table"])
    assert not out["passed"]


def test_lyapunov_at_origin():
    cert = _identity_cert()
    tr = SimulationTrace(t=np.linspace(0, 1, 5), x=np.zeros((5, 2)))
    out = lyapunov_along_trace(cert, tr)
    assert np.all(out["V"] == 0.0) and out["decreasing"]


def test_lyapunov_strict_decrease_example_a(builtins):
    sc = builtins["linear_detectable"]
    cert = sc.certificate(1.0, 0.5)
    tr = simulate_closed_loop(sc.system, np.array([0.6, -0.4]), 5.0, 0.01)
    V = lyapunov_along_trace(cert, tr)["V"]
    assert np.all(np.diff(V) < 0)
