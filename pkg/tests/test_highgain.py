import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import solve_continuous_lyapunov

from stealthprobe.errors import DesignError, InfeasibleError, ReconstructionError
from stealthprobe.highgain import (
    ObservabilityMap,
    build_matrices,
    hurwitz_coefficients,
    init_diameter,
    initialize_observer,
    lyapunov_residual_max,
    observer_step,
    reconstruct,
    rescale_error,
    select_theta,
    solve_lyapunov,
)
from stealthprobe.kfunctions import linear

# independent theta scan (scipy Lyapunov solve, direct evaluation of both
# conditions on the 2^j grid) for t*=0.5, De0=1, q=1, nu=1, phi=1, rho=r, K=0.05
SELECT_THETA_ORACLE = 512.0


@pytest.mark.parametrize("q,coeffs", [(1, (2, 1)), (2, (3, 3, 1)), (3, (4, 6, 4, 1))])
def test_hurwitz_coefficients(q, coeffs):
    assert hurwitz_coefficients(q) == coeffs


def test_build_matrices_identity_scaling():
    m = build_matrices(1, 1, theta=1.0)
    np.testing.assert_array_equal(m.Delta, np.eye(2))
    m = build_matrices(1, 1, theta=10.0)
    np.testing.assert_array_equal(m.Delta, np.diag([1.0, 10.0]))
    np.testing.assert_array_equal(m.Delta_inv @ m.A @ m.Delta, 10.0 * m.A)


def test_shift_matrix_block_shape():
    m = build_matrices(2, 2)
    want = np.zeros((6, 6))
    want[:4, 2:] = np.eye(4)
    np.testing.assert_array_equal(m.A, want)
    np.testing.assert_array_equal(m.C, np.hstack((np.eye(2), np.zeros((2, 4)))))


def test_non_hurwitz_rejected():
    with pytest.raises(DesignError):
        build_matrices(1, 1, coeffs=(-1.0, 1.0))


def test_lyapunov_scalar():
    assert solve_lyapunov(np.array([[-1.0]]), 2.0)[0, 0] == pytest.approx(1.0)


def test_lyapunov_against_scipy():
    m = build_matrices(1, 1)
    P = solve_lyapunov(m.M, 1.0)
    np.testing.assert_allclose(P, solve_continuous_lyapunov(m.M.T, -np.eye(2)), atol=1e-12)
    np.testing.assert_allclose(P, [[0.5, -0.5], [-0.5, 1.5]], atol=1e-12)
    assert lyapunov_residual_max(P, m.M, 1.0) <= 1e-8


def test_lyapunov_unstable_rejected():
    with pytest.raises(DesignError):
        solve_lyapunov(np.array([[0.1, 0.0], [0.0, -1.0]]), 1.0)


def test_select_theta_example():
    P = solve_lyapunov(build_matrices(1, 1).M, 1.0)
    sel = select_theta(0.5, 1.0, 0.05, linear(1.0), P, 1.0, 1.0, 1)
    assert sel.theta == SELECT_THETA_ORACLE
    assert sel.audit["chosen"]["theta_accuracy"]["holds"]
    assert not sel.audit["half"]["theta_accuracy"]["holds"]


def test_select_theta_relaxed_accuracy_uses_convergence_only():
    P = solve_lyapunov(build_matrices(1, 1).M, 1.0)
    sel = select_theta(0.5, 1.0, math.inf, linear(1.0), P, 1.0, 1.0, 1)
    lam_min = np.linalg.eigvalsh(P)[0]
    lam_max = np.linalg.eigvalsh(P)[-1]
    # q = 1: the convergence test is exp(-theta t/(4 lam_min)) <= 4 lam_max
    j = next(j for j in range(61) if math.exp(-(2.0**j) * 0.5 / (4 * lam_min)) <= 4 * lam_max)
    assert sel.theta == 2.0**j


@given(t_star=st.floats(0.001, 2.0), K=st.floats(1e-3, 1.0))
@settings(max_examples=60, deadline=None)
def test_select_theta_monotone_in_t_star(t_star, K):
    P = solve_lyapunov(build_matrices(2, 1).M, 1.0)
    a = select_theta(t_star, 3.0, K, linear(2.0), P, 1.0, 2.0, 2).theta
    b = select_theta(2 * t_star, 3.0, K, linear(2.0), P, 1.0, 2.0, 2).theta
    assert b <= a


def test_select_theta_infeasible_names_accuracy():
    P = solve_lyapunov(build_matrices(1, 1).M, 1.0)
    with pytest.raises(InfeasibleError) as info:
        select_theta(0.01, 5.0, 1e-12, linear(2.0), P, 1.0, 3.0, 1, theta_max=1e6)
    assert info.value.binding == "theta_accuracy"


def test_initialize_observer():
    np.testing.assert_array_equal(initialize_observer(0.7, 1, 0.01), [0.7, 0.0])
    np.testing.assert_array_equal(initialize_observer([1.0, -1.0], 2, 0.01), [1, -1, 0, 0, 0, 0])
    assert init_diameter(0.01, 2.5) == 5.0


def test_hold_branch_bitwise():
    Y = np.array([0.123456789, -9.87654321])
    out = observer_step(Y, build_matrices(1, 1, theta=100.0), 3.0, probing=False, h_step=0.01)
    assert out.tobytes() == Y.tobytes()


def test_zero_innovation_is_pure_shift():
    m = build_matrices(1, 1, theta=50.0)
    Y = np.array([1.0, 0.0])
    # kernel of the shift matrix and matching output: nothing moves
    np.testing.assert_array_equal(observer_step(Y, m, 1.0, True, 1e-3), Y)


def test_innovation_decreases_on_loss_of_excitation(builtins):
    from stealthprobe.dynamics import closed_loop_field, integrate

    sc = builtins["loss_of_excitation"]
    sys = sc.system
    probe, _ = sc.probing(1.0)
    m = build_matrices(1, 1, theta=4096.0)
    G = m.gain()

    def field(z, t):
        x, Y = z[:2], z[2:]
        return np.concatenate((closed_loop_field(sys, x, probe.value(t)), m.A @ Y + G @ (x[:1] - m.C @ Y)))

    x0 = np.array([0.3, -0.4])
    tr = integrate(field, np.concatenate((x0, [0.3, 0.0])), 0.0, 0.01, 1e-5)
    innov = np.abs(tr.x[:, 0] - tr.x[:, 2])
    late = innov[200:]
    assert late[-1] < innov[50] and np.max(late) <= np.max(innov[:200])


def test_reconstruct_loss_of_excitation_example(builtins):
    _, omap = builtins["loss_of_excitation"].probing(1.0)
    np.testing.assert_allclose(reconstruct(np.array([0.5, -0.3]), np.array([1.0, 0.0]), omap), [0.5, 1.2])


def test_reconstruct_linear_matches_solve(builtins):
    sc = builtins["linear_detectable"]
    _, omap = sc.probing(0.0)
    A, C = sc.linear.A, sc.linear.C
    O = np.vstack((C, C @ A))
    Y = np.array([0.4, -0.7])
    np.testing.assert_allclose(reconstruct(Y, np.zeros(2), omap), np.linalg.solve(O, Y), atol=1e-14)


def test_reconstruct_singularity():
    omap = ObservabilityMap(1, lambda Y, S: np.array([Y[0], Y[1] / S[0]]), linear(1.0))
    with pytest.raises(ReconstructionError):
        reconstruct(np.array([1.0, 1.0]), np.array([0.0, 0.0]), omap)


def test_rescale_examples():
    np.testing.assert_array_equal(rescale_error([5.0, 30.0], 10.0, 1, 1), [5.0, 3.0])
    e = np.array([1.0, -2.0])
    np.testing.assert_array_equal(rescale_error(e, 1.0, 1, 1), e)


@given(e=st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6), theta=st.floats(1.0, 1e4),
       q=st.sampled_from([1, 2, 5]))
@settings(max_examples=100, deadline=None)
def test_rescale_norm_bound(e, theta, q):
    n_y = 6 // (q + 1)
    e = np.array(e[: (q + 1) * n_y])
    z = rescale_error(e, theta, q, n_y)
    assert np.max(np.abs(e)) <= theta**q * np.max(np.abs(z)) * (1 + 1e-12) + 1e-300
