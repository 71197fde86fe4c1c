"""Scenario orchestration: passive estimation and the probing attack."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import (
    _jacobian,
    estimate_bound_constants,
    fit_envelopes,
    gronwall_check,
    lyapunov_along_trace,
    sample_sublevel,
    verify_estimation,
    verify_stealth,
)
from .config import AUTO, ScenarioConfig, resolve_defaults
from .detectable import check_detectability, default_poles, luenberger_gain, run_passive_estimation, ISSObserver
from .dynamics import (
    NON_PROBING,
    PROBING,
    ClosedLoopSystem,
    SimulationTrace,
    closed_loop_field,
    integrate,
    simulate_closed_loop,
    unprobed_field,
)
from .errors import ConfigError, DetectabilityError, FiniteEscapeError, InfeasibleError, StealthProbeError
from .highgain import (
    ObservabilityMap,
    build_matrices,
    init_diameter,
    initialize_observer,
    reconstruct,
    select_theta,
    solve_lyapunov,
)
from .io import write_report_json, write_trace_csv
from .probing import (
    ProbeSignal,
    ProbingSchedule,
    check_stealth_feasibility,
    max_probe_duration,
    probe_derivative_stack,
    select_period,
)
from .scenarios import Scenario, get_scenario

EXIT_PASS, EXIT_VERDICT, EXIT_INFEASIBLE, EXIT_MODEL = 0, 2, 3, 4
# observer stability budget for RK4 on the lifted estimator: h * theta <= this
THETA_STEP = 0.1
THETA_GRID_MAX = 2.0 ** 60


@dataclass
class RunResult:
    status: int
    report: dict
    trace: Optional[SimulationTrace] = None


def substeps(h_step: float, theta: float) -> int:
    """Grid refinement so the simulation step times ``theta`` stays within budget."""
    return max(1, math.ceil(h_step * theta / THETA_STEP - 1e-9))


def _on_grid(value: float, step: float) -> bool:
    m = round(value / step)
    return m >= 1 and abs(m * step - value) <= 1e-9 * max(1.0, value)


# --- probed co-simulation ---------------------------------------------------------

def simulate_probing(system: ClosedLoopSystem, probe: ProbeSignal, omap: ObservabilityMap, theta: float,
                     schedule: ProbingSchedule, x0, periods: int, h_sim: float, eps_y: float,
                     coeffs=None, first_probe_only: bool = False) -> SimulationTrace:
    """Closed loop under the dual-mode attack together with the lifted estimator.

    Each period is integrated as a probing segment, where plant, controller
    and estimator advance together, followed by a holding segment where the
    loop runs unattacked and the estimator is frozen. Rows at ``kT`` hold the
    re-seeded estimate, including the closing row at ``periods * T``;
    ``xhat_held`` keeps the value carried in from the left. ``first_probe_only`` stops after the first probing segment.
    """
    q, n, n_p, n_y = omap.q, system.n, system.plant.n_p, system.plant.n_y
    mats = build_matrices(q, n_y, coeffs, theta)
    G, A, C = mats.gain(), mats.A, mats.C
    h = system.plant.h
    T, t_star = schedule.T, schedule.t_star
    nominal = unprobed_field(system)

    ts, xs, ys, modes, Ys, xh, xh_held = [], [], [], [], [], [], []
    x = np.asarray(x0, dtype=float)
    held = None
    escape_time = None
    try:
        for k in range(periods):
            t0 = k * T
            Y0 = initialize_observer(h(x[:n_p]), q, eps_y)

            def field(z, t, t0=t0):
                xx, Y = z[:n], z[n:]
                ystar = probe.value(t - t0)
                return np.concatenate((closed_loop_field(system, xx, ystar), A @ Y + G @ (h(xx[:n_p]) - C @ Y)))

            seg = integrate(field, np.concatenate((x, Y0)), t0, t0 + t_star, h_sim)
            Xp, Yp = seg.x[:, :n], seg.x[:, n:]
            est = np.array([reconstruct(Y, probe_derivative_stack(probe, t - t0, q), omap)
                            for t, Y in zip(seg.t, Yp)])
            if held is None:
                held = est[0]
            # drop the previous period's final row, it is re-recorded here after the reset
            if ts:
                for lst in (ts, xs, ys, modes, Ys, xh, xh_held):
                    lst.pop()
            for i, t in enumerate(seg.t):
                probing = i < len(seg.t) - 1
                ts.append(t)
                xs.append(Xp[i])
                ys.append(probe.value(t - t0) if probing else h(Xp[i][:n_p]))
                modes.append(PROBING if probing else NON_PROBING)
                Ys.append(Yp[i])
                xh.append(est[i])
                xh_held.append(held if i == 0 else est[i])
            held = est[-1]
            x = Xp[-1]
            if first_probe_only:
                break

            hold = integrate(nominal, x, t0 + t_star, (k + 1) * T, h_sim)
            for t, xx in zip(hold.t[1:], hold.x[1:]):
                ts.append(t)
                xs.append(xx)
                ys.append(h(xx[:n_p]))
                modes.append(NON_PROBING)
                Ys.append(Yp[-1])
                xh.append(held)
                xh_held.append(held)
            x = hold.x[-1]
        if not first_probe_only:
            # the closing instant starts a new period: record it like any other kT row
            Y0 = initialize_observer(h(x[:n_p]), q, eps_y)
            ys[-1] = probe.value(0.0)
            modes[-1] = PROBING
            Ys[-1] = Y0
            xh[-1] = reconstruct(Y0, probe_derivative_stack(probe, 0.0, q), omap)
    except FiniteEscapeError as exc:
        escape_time = exc.time
        part = exc.trace
        for t, z in zip(part.t[1:], part.x[1:]):
            ts.append(t)
            xs.append(z[:n])
            ys.append(np.full(n_y, np.nan))
            modes.append(NON_PROBING)
            Ys.append(np.full(mats.dim, np.nan))
            xh.append(np.full(n, np.nan))
            xh_held.append(np.full(n, np.nan))

    X = np.array(xs)
    Y = np.array(ys, dtype=float).reshape(len(ts), n_y)
    truth = np.array([h(xx[:n_p]) for xx in X], dtype=float).reshape(len(ts), n_y)
    trace = SimulationTrace(
        t=np.array(ts), x=X, y=Y, a=Y - truth, mode=modes, Yhat=np.array(Ys),
        xhat=np.array(xh), xhat_held=np.array(xh_held), escape_time=escape_time,
    )
    trace.meta.update(theta=theta, h_sim=h_sim, T=T, t_star=t_star)
    return trace


def probe_disturbance(system: ClosedLoopSystem, probe: ProbeSignal, t_star: float, T: float):
    """``d = f(x, y*) - f(x, h(x_p))`` on the probe window and zero after it."""
    n_p = system.plant.n_p

    def d_probe(t, x):
        return closed_loop_field(system, x, probe.value(t)) - closed_loop_field(system, x, system.plant.h(x[:n_p]))

    zero = np.zeros(system.n)
    return [(t_star, d_probe), (T, lambda t, x: zero)]


# --- helpers ---------------------------------------------------------------------

def _error_entry(exc: Exception) -> dict:
    entry = {
        "code": getattr(exc, "code", "error"),
        "binding": getattr(exc, "binding", None),
        "field": getattr(exc, "field", None),
        "line": getattr(exc, "line", None),
        "message": str(exc),
    }
    audit = getattr(exc, "audit", None)
    if audit:
        entry["audit"] = audit
    return entry


def _initial_state(cfg: ScenarioConfig, scenario: Scenario, cert=None) -> np.ndarray:
    n = scenario.system.n
    if cfg.x0 is not None:
        if len(cfg.x0) != n:
            raise ConfigError(f"x0 has {len(cfg.x0)} entries, expected {n}", field="x0")
        return np.array(cfg.x0, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    if cert is None:
        return rng.uniform(-1.0, 1.0, n) * (cfg.delta_x or 1.0)
    for _ in range(1000):
        x0 = sample_sublevel(cert, cfg.r, 1, n, rng)[0]
        if np.max(np.abs(x0)) <= cfg.delta_x and (scenario.accept is None or scenario.accept(x0)):
            return x0
    raise ConfigError("could not sample an initial state inside the level set r", field="r")


def _scenario_block(cfg: ScenarioConfig, scenario: Scenario) -> dict:
    return {"name": cfg.label, "system": cfg.system, "mode": cfg.mode, "source": cfg.source,
            "config": cfg.echo()}


def _linear_model(scenario: Scenario):
    """``(A, C)`` for observer design: the exact linear model, else the linearisation at the origin."""
    sys = scenario.system
    if scenario.linear is not None:
        return scenario.linear.A, scenario.linear.C, "linear model"
    n_p = sys.plant.n_p
    y0 = np.atleast_1d(sys.plant.h(np.zeros(n_p)))
    A = _jacobian(lambda x: closed_loop_field(sys, x, y0), np.zeros(sys.n))
    C = _jacobian(lambda x: sys.output(x), np.zeros(sys.n))
    return A, C, "linearisation at the origin"


# --- passive mode ---------------------------------------------------------------

def run_passive(cfg: ScenarioConfig, scenario: Scenario) -> RunResult:
    """Detectability check, gain design and silent co-simulation."""
    report = {"scenario": _scenario_block(cfg, scenario)}
    sys = scenario.system
    A, C, source = _linear_model(scenario)
    det = check_detectability(A, C)
    report["detectability"] = {
        "model": source,
        "detectable": det.detectable,
        "unobservable_eigenvalues": [[float(np.real(v)), float(np.imag(v))] for v in det.unobservable],
    }
    if not det.detectable:
        raise DetectabilityError("linear model is not detectable; no output-injection observer exists")
    if scenario.injection is not None and scenario.linear is None:
        injection = scenario.injection
        report["design"] = {"injection": "scenario-supplied"}
    else:
        poles = default_poles(A)
        L = luenberger_gain(A, C, poles)
        injection = lambda v, L=L: L @ np.atleast_1d(v)  # noqa: E731
        err_eigs = np.linalg.eigvals(A - L @ C)
        report["design"] = {
            "injection": "linear gain",
            "poles": [[float(np.real(p)), float(np.imag(p))] for p in poles],
            "L": L,
            "error_eigenvalues": [[float(np.real(v)), float(np.imag(v))] for v in err_eigs],
        }
    observer = ISSObserver(sys, injection)
    x0 = _initial_state(cfg, scenario)
    if cfg.xhat0 is not None:
        if len(cfg.xhat0) != sys.n:
            raise ConfigError(f"xhat0 has {len(cfg.xhat0)} entries, expected {sys.n}", field="xhat0")
        xhat0 = np.array(cfg.xhat0, dtype=float)
    else:
        xhat0 = x0 + 1.0
    if not _on_grid(cfg.duration, cfg.h_step):
        raise ConfigError("duration must be a multiple of h_step", field="duration")
    trace = run_passive_estimation(sys, observer, x0, xhat0, cfg.duration, cfg.h_step)
    reference = simulate_closed_loop(sys, x0, cfg.duration, cfg.h_step)
    err = trace.meta["error_norm"]
    identical = bool(np.array_equal(trace.x, reference.x))
    converged = bool(err[-1] < cfg.tolerance)
    report["simulation"] = {"x0": x0, "xhat0": xhat0, "h_step": cfg.h_step, "duration": cfg.duration,
                            "steps": len(trace.t) - 1}
    report["errors"] = {"initial": float(err[0]), "final": float(err[-1]), "max": float(np.max(err)),
                        "tolerance": cfg.tolerance}
    report["verdicts"] = {"converged": converged, "trace_identical": identical,
                          "passed": converged and identical}
    status = EXIT_PASS if converged and identical else EXIT_VERDICT
    return RunResult(status, report, trace)


# --- probing mode ---------------------------------------------------------------

def _floor_grid(value: float, step: float) -> float:
    return math.floor(value / step + 1e-9) * step


def resolve_schedule(cfg: ScenarioConfig, beta_x, consts, cert) -> tuple:
    """Fix ``(T, t_star)``, filling ``auto`` entries from the selection rules."""
    h = cfg.h_step

    def budget_t_star(T):
        ts = _floor_grid(max_probe_duration(T, cfg.sigma, consts.F, consts.F_star, consts.L_bar, cert.rho), h)
        if ts <= 0 or ts >= T:
            raise InfeasibleError(
                f"no grid-aligned probe duration fits the perturbation budget at T={T:.6g}",
                binding="stealth_budget", audit={"T": T, "max_t_star": ts})
        return ts

    T, t_star = cfg.T, cfg.t_star
    src = {"T": "explicit" if T != AUTO else AUTO, "t_star": "explicit" if t_star != AUTO else AUTO}
    if T == AUTO and t_star == AUTO:
        # a longer probe lengthens T, which shrinks the budget; walk t* down to a fixed point
        t_star = budget_t_star(select_period(cfg.delta_x, cfg.eps_xtilde, h, beta_x, h))
        for _ in range(50):
            T = select_period(cfg.delta_x, cfg.eps_xtilde, t_star, beta_x, h)
            fits = budget_t_star(T)
            if fits >= t_star:
                break
            t_star = fits
        else:
            raise InfeasibleError("automatic (T, t_star) search did not settle", binding="stealth_budget")
    elif T == AUTO:
        T = select_period(cfg.delta_x, cfg.eps_xtilde, t_star, beta_x, h)
    elif t_star == AUTO:
        t_star = budget_t_star(T)
    for key, v in (("T", T), ("t_star", t_star)):
        if not _on_grid(v, h):
            raise ConfigError(f"{key}={v} is not a multiple of h_step={h}", field=key)
    if not t_star < T:
        raise ConfigError(f"t_star ({t_star}) must be smaller than T ({T})", field="t_star")
    return T, t_star, src


def run_probing(cfg: ScenarioConfig, scenario: Scenario, report: dict) -> RunResult:
    """Constants, envelopes, schedule and gain selection, attacked run, verdicts.

    ``report`` is filled in place so partial results survive an error.
    """
    sys = scenario.system
    if scenario.probing is None:
        raise ConfigError(f"system {cfg.system!r} has no probe / observability map", field="mode")
    cert = scenario.certificate(cfg.delta_x, cfg.R_m)
    report["certificate"] = cert.describe()
    probe, omap = scenario.probing(cfg.probe_level)
    q = omap.q
    t_for_phi = cfg.t_star if cfg.t_star != AUTO else (cfg.T if cfg.T != AUTO else 10 * cfg.h_step)
    consts = estimate_bound_constants(sys, cert, probe, cfg.samples, t_star=t_for_phi, q=q, seed=cfg.seed)
    report["constants"] = consts.as_dict()
    if not _on_grid(cfg.fit_horizon, cfg.fit_step):
        raise ConfigError("fit_horizon must be a multiple of fit_step", field="fit_horizon")
    fits = fit_envelopes(sys, cert, cfg.delta_x, cfg.fit_horizon, cfg.fit_step, seed=cfg.seed, accept=scenario.accept)
    report["fits"] = fits.as_dict()

    T, t_star, src = resolve_schedule(cfg, fits.beta_x, consts, cert)
    schedule = ProbingSchedule(T, t_star)
    decay = fits.beta_x(cfg.delta_x, T - t_star)
    try:
        feas = check_stealth_feasibility(T, t_star, cfg.r, cert.R, cfg.sigma, consts.F, consts.F_star,
                                         consts.L_bar, cert.rho, fits.beta_V)
    except ValueError as exc:
        raise ConfigError(str(exc), field="sigma" if "sigma" in str(exc) else "r") from exc
    report["schedule"] = {
        "T": T, "t_star": t_star, "T_source": src["T"], "t_star_source": src["t_star"],
        "period_decay": {"lhs_betax_deltax_hold": decay, "rhs_eps_xtilde": cfg.eps_xtilde,
                         "margin": cfg.eps_xtilde - decay, "holds": decay <= cfg.eps_xtilde},
        "feasibility": feas.as_dict(),
        "max_t_star_for_budget": max_probe_duration(T, cfg.sigma, consts.F, consts.F_star, consts.L_bar, cert.rho),
    }
    if not feas.feasible:
        raise InfeasibleError(f"stealth conditions fail ({feas.binding})", binding=feas.binding,
                              audit=feas.as_dict())

    mats = build_matrices(q, sys.plant.n_y)
    P = solve_lyapunov(mats.M, cfg.nu)
    delta_e0 = init_diameter(cfg.eps_y, consts.H_q)
    periods = cfg.periods
    theta_cap = min(THETA_GRID_MAX, THETA_STEP * cfg.max_steps / (periods * T))
    if cfg.theta == AUTO:
        sel = select_theta(t_star, delta_e0, cfg.k_xtilde, omap.rho_psi, P, cfg.nu, consts.phi_bar, q,
                           theta_max=theta_cap)
        theta, audit = sel.theta, sel.audit
    else:
        theta, audit = float(cfg.theta), {"fixed": True}
    report["theta_audit"] = {"theta": theta, "source": "auto" if cfg.theta == AUTO else "explicit",
                             "delta_e0": delta_e0, "phi_bar": consts.phi_bar, "theta_cap": theta_cap, **audit}

    m = substeps(cfg.h_step, theta)
    h_sim = cfg.h_step / m
    x0 = _initial_state(cfg, scenario, cert)
    trace = simulate_probing(sys, probe, omap, theta, schedule, x0, periods, h_sim, cfg.eps_y)
    report["simulation"] = {"x0": x0, "V_x0": cert.V(x0), "h_step": cfg.h_step, "substeps": m, "h_sim": h_sim,
                            "steps": len(trace.t) - 1, "periods": periods, "escape_time": trace.escape_time}

    stealth = verify_stealth(trace, cert, cfg.delta_x, fits.beta_V, schedule, periods)
    if trace.escape_time is not None:
        report["verdicts"] = {"stealth": stealth, "passed": False}
        return RunResult(EXIT_VERDICT, report, trace)

    c = math.sqrt(audit["lambda_max_P"] / audit["lambda_min_P"]) if "lambda_max_P" in audit else \
        math.sqrt(np.max(np.linalg.eigvalsh(P)) / np.min(np.linalg.eigvalsh(P)))
    in_probe_bound = omap.rho_psi(c * delta_e0 * theta ** (q - 1))
    sigma_bar = fits.beta_x(cfg.delta_x, 0.0)
    est = verify_estimation(trace, cfg.k_xtilde, cfg.delta_x, cfg.eps_xtilde, schedule, in_probe_bound,
                            sigma_bar, periods)
    lyap = lyapunov_along_trace(cert, trace, fits.beta_V, cfg.sigma, schedule)
    gron = gronwall_check(sys, cert, probe_disturbance(sys, probe, t_star, T), T, x0, consts.L_bar,
                          fits.beta_V, h_sim)
    report["period_table"] = est["period_table"]
    report["gronwall"] = gron
    lyap_ok = bool(lyap["decreasing"] and lyap["envelope_pass"])
    verdicts = {
        "stealth": {k: v for k, v in stealth.items()},
        "estimation": {"in_probe_bound": in_probe_bound, "sigma_bar": sigma_bar, "passed": est["passed"],
                       "in_probe_passed": all(r["in_probe_pass"] for r in est["period_table"])},
        "lyapunov": {"nonprobing_increases": len(lyap["increase_steps"]),
                     "envelope_min_margin": lyap["envelope_min_margin"], "passed": lyap_ok},
        "gronwall": gron["passed"],
    }
    passed = bool(stealth["passed"] and est["passed"] and lyap_ok and gron["passed"])
    verdicts["passed"] = passed
    report["verdicts"] = verdicts
    return RunResult(EXIT_PASS if passed else EXIT_VERDICT, report, trace)


# --- entry point --------------------------------------------------------------------

def run_scenario(cfg: ScenarioConfig, out_dir=None) -> RunResult:
    """Run one scenario; write ``<name>.trace.csv`` and ``<name>.report.json`` when ``out_dir`` is given.

    Every failure is caught and recorded in the report's ``error`` block;
    the returned status is the CLI exit code.
    """
    report = {"scenario": {"name": cfg.label, "system": cfg.system, "mode": cfg.mode, "source": cfg.source,
                           "config": cfg.echo()}}
    trace = None
    try:
        scenario = get_scenario(cfg.system)
        cfg = resolve_defaults(cfg, scenario.defaults)
        report["scenario"] = _scenario_block(cfg, scenario)
        if cfg.mode == "passive":
            result = run_passive(cfg, scenario)
            report = result.report
        else:
            result = run_probing(cfg, scenario, report)
        trace, status = result.trace, result.status
        report["error"] = None
    except StealthProbeError as exc:
        status = exc.exit_status
        report["error"] = _error_entry(exc)
        trace = getattr(exc, "trace", None)
        report.setdefault("verdicts", {"passed": False})
    except (ValueError, np.linalg.LinAlgError) as exc:
        status = EXIT_MODEL
        report["error"] = {"code": "model", "binding": None, "field": None, "line": None, "message": str(exc)}
        report.setdefault("verdicts", {"passed": False})
    report["exit_status"] = status
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report_json(report, out / f"{cfg.label}.report.json")
        if trace is not None:
            write_trace_csv(trace, out / f"{cfg.label}.trace.csv")
    return RunResult(status, report, trace)
