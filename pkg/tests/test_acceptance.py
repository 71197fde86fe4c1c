"""Acceptance criteria, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line with the measured
numbers and its runtime. Run standalone with ``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import functools
import sys
import time

import numpy as np
import pytest

from stealthprobe.analysis import estimate_bound_constants, fit_envelopes, gronwall_check, sample_sublevel
from stealthprobe.config import parse_text
from stealthprobe.dynamics import closed_loop_field, integrate, simulate_closed_loop
from stealthprobe.highgain import build_matrices, reconstruct, solve_lyapunov
from stealthprobe.pipeline import run_scenario
from stealthprobe.probing import probe_derivative_stack
from stealthprobe.scenarios import builtin_systems

RESULTS = {}


def _report(n, ok, detail, elapsed, limit):
    ok = bool(ok and elapsed < limit)
    line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.2f}s / limit {limit:g}s]"
    RESULTS[n] = line
    print(line, flush=True)
    return ok


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# 1 ------------------------------------------------------------------------------

def criterion_1():
    def run():
        cfg = parse_text("system = linear_detectable\nmode = passive\nduration = 10\nh_step = 0.01\n"
                         "x0 = 0.3, -0.6\nxhat0 = 1.3, -0.6\n")
        return run_scenario(cfg)

    res, dt = _timed(run)
    err = res.report["errors"]
    ok = (res.status == 0 and err["initial"] == 1.0 and err["final"] < 1e-6
          and res.report["verdicts"]["trace_identical"])
    return _report(1, ok, f"initial error {err['initial']:.3g}, error at t=10 {err['final']:.3e}, "
                          f"bit-identical={res.report['verdicts']['trace_identical']}", dt, 5)


# 2 ------------------------------------------------------------------------------

def criterion_2():
    def run():
        worst = 0.0
        exact_zeros = True
        for q in range(1, 5):
            for n_y in range(1, 4):
                for theta in (1.0, 10.0, 100.0):
                    m = build_matrices(q, n_y, theta=theta)
                    lhs = m.Delta_inv @ m.A @ m.Delta
                    rhs = theta * m.A
                    zero = rhs == 0
                    exact_zeros &= bool(np.all(lhs[zero] == 0))
                    worst = max(worst, float(np.max(np.abs(lhs[~zero] - rhs[~zero]) / np.abs(rhs[~zero]))))
                    cd = m.C @ m.Delta
                    exact_zeros &= bool(np.all(cd[m.C == 0] == 0))
                    worst = max(worst, float(np.max(np.abs(cd[m.C != 0] - m.C[m.C != 0]))))
        return exact_zeros, worst

    (zeros, worst), dt = _timed(run)
    return _report(2, zeros and worst <= 1e-12, f"structural zeros exact={zeros}, max relative deviation {worst:.1e}",
                   dt, 1)


# 3 ------------------------------------------------------------------------------

def criterion_3():
    def run():
        worst = -np.inf
        for q in range(1, 5):
            for n_y in range(1, 4):
                m = build_matrices(q, n_y)
                P = solve_lyapunov(m.M, 1.0)
                worst = max(worst, float(np.max(np.linalg.eigvalsh(P @ m.M + m.M.T @ P + np.eye(m.dim)))))
        return worst

    worst, dt = _timed(run)
    return _report(3, worst <= 1e-8, f"max eigenvalue of residual + nu I = {worst:.2e}", dt, 1)


# 4, 5, 6 ----------------------------------------------------------------------------

LOE = "system = loss_of_excitation\nmode = probing\ndelta_x = 1\nk_xtilde = 0.05\neps_xtilde = 0.1\nperiods = 10\n"
CUBIC = "system = cubic_damped\nmode = probing\ndelta_x = 1\nk_xtilde = 0.05\neps_xtilde = 0.1\nperiods = 10\n"


@functools.lru_cache(maxsize=None)
def _probing_run(text):
    return _timed(lambda: run_scenario(parse_text(text)))


def criterion_4():
    base, dt0 = _probing_run(LOE)
    theta = base.report["theta_audit"]["theta"]
    tripled, dt1 = _timed(lambda: run_scenario(parse_text(LOE + f"theta = {3 * theta}\n")))
    e0 = [r["end_of_probe_error"] for r in base.report["period_table"]]
    e1 = [r["end_of_probe_error"] for r in tripled.report["period_table"]]
    ratio = base.report["simulation"]["h_sim"] / tripled.report["simulation"]["h_sim"]
    ok = (len(e0) == 10 and max(e0) <= 0.05 and all(b <= a for a, b in zip(e0, e1)) and ratio == 3)
    return _report(4, ok, f"theta={theta:g}, max end-of-probe error {max(e0):.3e} <= 0.05; at 3*theta "
                          f"{max(e1):.3e}, step ratio {ratio:g}, non-increasing in every period="
                          f"{all(b <= a for a, b in zip(e0, e1))}", dt0 + dt1, 30)


def criterion_5():
    base, dt = _probing_run(LOE)
    st = base.report["verdicts"]["stealth"]
    levels = st["level_checks"]
    viol = sum(not c["passed"] for c in levels)
    ok = st["max_norm"] <= st["K_x"] and len(levels) == 10 and viol == 0
    return _report(5, ok, f"max|x| {st['max_norm']:.4f} <= K_x {st['K_x']:.4f}; "
                          f"max V(kT+t*) {max(c['V'] for c in levels):.4f} <= R {levels[0]['R']:.4g}; "
                          f"violations {viol}/10", dt, 30)


def criterion_6():
    lines, total, ok = [], 0.0, True
    for label, text in (("loss_of_excitation", LOE), ("cubic_damped", CUBIC)):
        res, dt = _probing_run(text)
        total += dt
        table = res.report["period_table"]
        fam = {
            "end-of-probe": all(r["end_of_probe_pass"] for r in table),
            "in-interval": all(r["in_interval_pass"] for r in table),
            "end-of-period": all(r["end_of_period_pass"] for r in table),
        }
        ok &= len(table) == 10 and all(fam.values())
        lines.append(f"{label}: " + ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in fam.items()))
    return _report(6, ok, "; ".join(lines), total, 60)


# 7 ------------------------------------------------------------------------------

def criterion_7():
    def run():
        sc = builtin_systems()["linear_detectable"]
        cert = sc.certificate(1.0, 0.5)
        consts = estimate_bound_constants(sc.system, cert, sample_count=1000)
        fits = fit_envelopes(sc.system, cert, 1.0, 10.0, 0.05)
        rng = np.random.default_rng(7)
        x0 = sample_sublevel(cert, cert.R, 1, 2, rng)[0]
        T = 1.0
        direction = np.array([1.0, -0.5])
        bad_dev = bad_V = 0
        for mag in np.logspace(-4, -1, 10):
            rep = gronwall_check(sc.system, cert, lambda t, x, m=mag: m * direction, T, x0, consts.L_bar,
                                 fits.beta_V, 0.01)
            bad_dev += not rep["deviation_pass"]
            bad_V += not rep["V_pass"]
        return bad_dev, bad_V, consts.L_bar

    (bad_dev, bad_V, L_bar), dt = _timed(run)
    return _report(7, bad_dev == 0 and bad_V == 0,
                   f"10 magnitudes, L_bar={L_bar:.3f}: deviation violations {bad_dev}, level violations {bad_V}", dt, 10)


# 8 ------------------------------------------------------------------------------

def criterion_8():
    def run():
        worst = {}
        rng = np.random.default_rng(11)
        for name, sc in builtin_systems().items():
            probe, omap = sc.probing(sc.defaults.get("probe_level", 1.0))
            lie = sc.system.plant.lie_h
            t_star = 0.5
            pts = []
            for _ in range(10):
                x0 = rng.uniform(-1.0, 1.0, 2)
                tr = integrate(lambda x, t: closed_loop_field(sc.system, x, probe.value(t)), x0, 0.0, t_star, 0.005)
                idx = rng.choice(len(tr.t), 10, replace=False)
                pts += [(tr.t[i], tr.x[i]) for i in idx]
            err = 0.0
            for s, x in pts:
                stack = probe_derivative_stack(probe, s, omap.q)
                Y = np.concatenate([lie(x, stack, i) for i in range(omap.q + 1)])
                err = max(err, float(np.max(np.abs(reconstruct(Y, stack, omap) - x))))
            worst[name] = (len(pts), err)
        return worst

    worst, dt = _timed(run)
    ok = all(n == 100 and e <= 1e-8 for n, e in worst.values())
    return _report(8, ok, ", ".join(f"{k}: {n} points, max error {e:.1e}" for k, (n, e) in worst.items()), dt, 5)


# 9 ------------------------------------------------------------------------------

def _cubic_reference(x0, horizon, h):
    """Independent scalar RK4 with compensated summation, pure Python floats."""

    def f(a, c):
        return -a - c, -c * c * c + a

    a, c = x0
    ca = cc = 0.0
    for _ in range(round(horizon / h)):
        k1 = f(a, c)
        k2 = f(a + 0.5 * h * k1[0], c + 0.5 * h * k1[1])
        k3 = f(a + 0.5 * h * k2[0], c + 0.5 * h * k2[1])
        k4 = f(a + h * k3[0], c + h * k3[1])
        da = h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]) - ca
        na = a + da
        ca = (na - a) - da
        a = na
        dc = h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]) - cc
        nc = c + dc
        cc = (nc - c) - dc
        c = nc
    return np.array([a, c])


def criterion_9():
    def run():
        sys_c = builtin_systems()["cubic_damped"].system
        x0, horizon = (1.0, 1.2), 0.5
        ref = _cubic_reference(x0, horizon, 1e-6)
        steps = (0.125, 0.0625, 0.03125, 0.015625)
        errs = [float(np.max(np.abs(simulate_closed_loop(sys_c, np.array(x0), horizon, h).x[-1] - ref)))
                for h in steps]
        return errs

    errs, dt = _timed(run)
    ratios = [errs[i] / errs[i + 1] for i in range(3)]
    return _report(9, min(ratios) >= 8, "error ratios per halving " + ", ".join(f"{r:.2f}" for r in ratios), dt, 10)


# 10 ------------------------------------------------------------------------------

def criterion_10():
    def run():
        tight = run_scenario(parse_text(LOE.replace("k_xtilde = 0.05", "k_xtilde = 1e-12")))
        long_probe = run_scenario(parse_text(
            "system = loss_of_excitation\nmode = probing\ndelta_x = 1\nT = 0.05\nt_star = 0.045\nsigma = 0.05\n"))
        return tight, long_probe

    (tight, long_probe), dt = _timed(run)
    b1 = tight.report["error"]["binding"]
    b2 = long_probe.report["error"]["binding"]
    ok = tight.status == 3 and b1 == "theta_accuracy" and long_probe.status == 3 and b2 == "stealth_budget"
    return _report(10, ok, f"K=1e-12 -> exit {tight.status} binding {b1}; t*=0.9T, sigma=0.05 -> exit "
                           f"{long_probe.status} binding {b2}", dt, 5)


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8,
            criterion_9, criterion_10]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 11)])
def test_acceptance(criterion, capsys):
    with capsys.disabled():
        print()
        ok = criterion()
    assert ok


if __name__ == "__main__":
    passed = [c() for c in CRITERIA]
    sys.exit(0 if all(passed) else 1)
