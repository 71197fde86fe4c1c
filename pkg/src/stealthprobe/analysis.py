"""Numerical checks of the stability, stealth and estimation bounds.

Existence statements (comparison functions, Lipschitz constants, compact
sets) are turned into concrete numbers by sampling and then inflated:
1.2x for Lipschitz and sup constants, 1.5x for the derivative bound.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import (NON_PROBING, PROBING, ClosedLoopSystem, SimulationTrace, closed_loop_field, inf_norm,
                       integrate, unprobed_field)
from .errors import CertificateDomainError, StabilityViolationError
from .kfunctions import ExpKL, KFunction
from .probing import ProbeSignal, ProbingSchedule, probe_derivative_stack

SUP_INFLATION = 1.2
PHI_INFLATION = 1.5
KL_INFLATION = 1.2
V_INCREASE_TOL = 1e-7
C2_TOL = 1e-9


@dataclass(frozen=True)
class LyapunovCertificate:
    V: Callable
    gradV: Callable
    alpha1: KFunction
    alpha2: KFunction
    alpha3: KFunction
    rho: KFunction
    R: float
    R_m: float
    label: str = ""

    @property
    def box_radius(self) -> float:
        """Radius of an infinity-norm box containing the sublevel set at ``R + R_m``."""
        return self.alpha1.inv(self.R + self.R_m)

    def describe(self) -> dict:
        return {"label": self.label, "R": self.R, "R_m": self.R_m, "box_radius": self.box_radius}


def quadratic_certificate(P, delta_x: float, R_m: float, alpha3: Optional[KFunction] = None,
                          A_cl=None, label: str = "") -> LyapunovCertificate:
    """Certificate for ``V = x^T P x`` with infinity-norm comparison functions.

    ``alpha3`` defaults to the linear decay rate implied by ``A_cl`` when
    that matrix is given.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n = P.shape[0]
    ev = np.linalg.eigvalsh(P)
    lam_min, lam_max = float(ev[0]), float(ev[-1])
    alpha1 = KFunction(lambda s: lam_min * s * s, f"{lam_min:.6g}*s^2")
    alpha2 = KFunction(lambda s: n * lam_max * s * s, f"{n * lam_max:.6g}*s^2")
    if alpha3 is None:
        if A_cl is None:
            raise ValueError("need alpha3 or A_cl")
        A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
        Q = P @ A_cl + A_cl.T @ P
        rate = -float(np.max(np.linalg.eigvalsh(Q))) / lam_max
        if rate <= 0:
            raise CertificateDomainError("quadratic form does not decrease along the closed loop")
        alpha3 = KFunction(lambda v: rate * v, f"{rate:.6g}*v")
    R = alpha1(delta_x)
    gain = 2.0 * math.sqrt(n) * lam_max * math.sqrt((R + R_m) / lam_min)
    rho = KFunction(lambda r: gain * r + r * r, f"{gain:.6g}*r + r^2")
    return LyapunovCertificate(
        V=lambda x: float(np.asarray(x) @ P @ np.asarray(x)),
        gradV=lambda x: 2.0 * P @ np.asarray(x),
        alpha1=alpha1, alpha2=alpha2, alpha3=alpha3, rho=rho, R=R, R_m=R_m,
        label=label or "quadratic",
    )


# --- sampling ---------------------------------------------------------------

def sample_sublevel(cert: LyapunovCertificate, level: float, count: int, n: int, rng,
                    lower: float = -math.inf, max_batches: int = 1000) -> np.ndarray:
    """Rejection-sample ``count`` points with ``lower <= V(x) <= level``."""
    b = cert.alpha1.inv(level)
    if not math.isfinite(b):
        raise CertificateDomainError("sublevel set is unbounded")
    out = []
    for _ in range(max_batches):
        pts = rng.uniform(-b, b, size=(max(count, 64), n))
        for p in pts:
            v = cert.V(p)
            if not math.isfinite(v):
                raise CertificateDomainError("V is not finite on the sampling box")
            if lower <= v <= level:
                out.append(p)
                if len(out) == count:
                    return np.array(out)
    raise CertificateDomainError("could not sample the requested level set")


def _jacobian(fn, z, eps=1e-6) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    cols = []
    for i in range(z.size):
        dz = np.zeros_like(z)
        dz[i] = eps * max(1.0, abs(z[i]))
        cols.append((np.asarray(fn(z + dz), float) - np.asarray(fn(z - dz), float)) / (2 * dz[i]))
    return np.atleast_2d(np.column_stack(cols))


def induced_inf_norm(J) -> float:
    return float(np.max(np.sum(np.abs(np.atleast_2d(J)), axis=1)))


@dataclass
class BoundConstants:
    F: float
    F_star: float
    l_x: float
    l_y: float
    l_h: float
    phi_bar: Optional[float] = None
    H_q: Optional[float] = None
    raw: dict = field(default_factory=dict)

    @property
    def L_bar(self) -> float:
        return self.l_x + self.l_y * self.l_h

    def as_dict(self) -> dict:
        d = asdict(self)
        d["L_bar"] = self.L_bar
        return d


def lipschitz_estimates(system: ClosedLoopSystem, points, y_values) -> dict:
    """Raw (uninflated) sup of Jacobian norms over sampled points.

    ``y_values`` is a list, per point, of output arguments at which to
    differentiate the field.
    """
    n_p = system.plant.n_p
    l_x = l_y = l_h = 0.0
    for x, ys in zip(points, y_values):
        for y in ys:
            y = np.atleast_1d(y)
            l_x = max(l_x, induced_inf_norm(_jacobian(lambda z: closed_loop_field(system, z, y), x)))
            l_y = max(l_y, induced_inf_norm(_jacobian(lambda v: closed_loop_field(system, x, v), y)))
        l_h = max(l_h, induced_inf_norm(_jacobian(lambda xp: np.atleast_1d(system.plant.h(xp)), x[:n_p])))
    return {"l_x": l_x, "l_y": l_y, "l_h": l_h}


def output_derivative_bounds(system: ClosedLoopSystem, probe: ProbeSignal, t_star: float, q: int,
                             starts, steps: int = 50) -> dict:
    """Sup of output derivatives ``1..q`` and ``q+1`` along probed runs from ``starts``."""
    lie = system.plant.lie_h

    def field(x, t):
        return closed_loop_field(system, x, probe.value(t))

    H_q = phi = 0.0
    for x0 in starts:
        tr = integrate(field, x0, 0.0, t_star, t_star / steps)
        for t, x in zip(tr.t, tr.x):
            stack = probe_derivative_stack(probe, t, q)
            for i in range(1, q + 1):
                H_q = max(H_q, inf_norm(lie(x, stack, i)))
            phi = max(phi, inf_norm(lie(x, stack, q + 1)))
    return {"H_q": H_q, "phi": phi}


def estimate_bound_constants(system: ClosedLoopSystem, cert: LyapunovCertificate,
                             probe: Optional[ProbeSignal] = None, sample_count: int = 1000,
                             t_star: Optional[float] = None, q: Optional[int] = None, seed: int = 0,
                             trajectories: int = 20) -> BoundConstants:
    """Sampled sup/Lipschitz constants over the sublevel set at ``R + R_m``."""
    if sample_count < 1000:
        raise ValueError("sample_count must be at least 1000")
    rng = np.random.default_rng(seed)
    n = system.n
    pts = sample_sublevel(cert, cert.R + cert.R_m, sample_count, n, rng)
    offsets = np.linspace(0.0, t_star, 5) if (probe is not None and t_star) else [0.0]
    probe_vals = [probe.value(s) for s in offsets] if probe is not None else []

    F = F_star = 0.0
    y_values = []
    for x in pts:
        yh = system.output(x)
        fx = closed_loop_field(system, x, yh)
        F = max(F, inf_norm(fx))
        for yp in probe_vals:
            F_star = max(F_star, inf_norm(closed_loop_field(system, x, yp)))
        y_values.append([yh] + probe_vals[:1])
    if not (math.isfinite(F) and math.isfinite(F_star)):
        raise CertificateDomainError("field is unbounded on the certificate domain")
    lip = lipschitz_estimates(system, pts, y_values)

    raw = {"F": F, "F_star": F_star, **lip}
    phi_bar = H_q = None
    if probe is not None and q is not None and system.plant.lie_h is not None and t_star:
        der = output_derivative_bounds(system, probe.on(t_star), t_star, q, pts[:trajectories])
        raw.update(der)
        phi_bar = PHI_INFLATION * max(der["phi"], 1e-12)
        H_q = SUP_INFLATION * der["H_q"]
    k = SUP_INFLATION
    return BoundConstants(
        F=k * max(F, 1e-12), F_star=k * max(F_star, 1e-12),
        l_x=k * max(lip["l_x"], 1e-12), l_y=k * max(lip["l_y"], 1e-12), l_h=k * max(lip["l_h"], 1e-12),
        phi_bar=phi_bar, H_q=H_q, raw=raw,
    )


def count_rho_violations(cert: LyapunovCertificate, n: int, samples: int = 2000, seed: int = 0) -> int:
    """Pairs on the annulus ``R <= V <= R + R_m`` breaking ``|V(x)-V(w)| <= rho(|x-w|)``."""
    rng = np.random.default_rng(seed)
    a = sample_sublevel(cert, cert.R + cert.R_m, samples, n, rng, lower=cert.R)
    b = sample_sublevel(cert, cert.R + cert.R_m, samples, n, rng, lower=cert.R)
    bad = 0
    for x, w in zip(a, b):
        if abs(cert.V(x) - cert.V(w)) > cert.rho(inf_norm(x - w)) * (1 + 1e-12):
            bad += 1
    return bad


def check_certificate(system: ClosedLoopSystem, cert: LyapunovCertificate, samples: int = 10000,
                      seed: int = 0) -> dict:
    """Sampled sandwich and decrease conditions; returns violation counts."""
    rng = np.random.default_rng(seed)
    n = system.n
    b = cert.box_radius
    box = rng.uniform(-b, b, size=(samples, n))
    sandwich = 0
    for x in box:
        r = inf_norm(x)
        v = cert.V(x)
        if not (cert.alpha1(r) * (1 - 1e-12) <= v <= cert.alpha2(r) * (1 + 1e-12)):
            sandwich += 1
    decrease = 0
    pts = sample_sublevel(cert, cert.R + cert.R_m, min(samples, 5000), n, rng)
    for x in pts:
        dv = float(np.dot(cert.gradV(x), closed_loop_field(system, x, system.output(x))))
        if dv > -cert.alpha3(cert.V(x)) + C2_TOL:
            decrease += 1
    return {"sandwich_violations": sandwich, "decrease_violations": decrease, "box_radius": b}


# --- KL envelopes -------------------------------------------------------------

def fit_kl_envelope(times, series) -> ExpKL:
    """Fit ``c1 r exp(-c2 s)`` over an ensemble of nonnegative decaying series.

    Each series is normalised by its initial value; the pointwise maximum is
    fitted by least squares in log space, ``c1`` is inflated and then raised
    further if needed so the curve dominates every sample.
    """
    times = np.asarray(times, dtype=float)
    series = np.atleast_2d(np.asarray(series, dtype=float))
    if series.shape[0] < 1:
        raise ValueError("empty ensemble")
    s0 = series[:, 0]
    if np.all(np.max(np.abs(series), axis=1) == 0):
        return ExpKL(1.0, math.inf)
    keep = s0 > 0
    ratios = series[keep] / s0[keep, None]
    env = np.max(ratios, axis=0)
    if not env[-1] < env[0]:
        raise StabilityViolationError("ensemble envelope does not decay")
    mask = env > 1e-12 * env[0]
    tt, le = times[mask] - times[0], np.log(env[mask])
    if tt.size < 2:
        return ExpKL(1.0, math.inf)
    slope, intercept = np.polyfit(tt, le, 1)
    c2 = -float(slope)
    if not c2 > 0:
        raise StabilityViolationError("fitted decay rate is not positive")
    c1 = max(1.0, KL_INFLATION * math.exp(intercept))
    need = float(np.max(env * np.exp(c2 * (times - times[0]))))
    if need > c1:
        c1 = need * (1 + 1e-9)
    return ExpKL(c1, c2)


def envelope_violation_mass(beta: ExpKL, times, series) -> float:
    """Fraction of samples lying above ``beta(s(0), t)``."""
    times = np.asarray(times, dtype=float)
    series = np.atleast_2d(np.asarray(series, dtype=float))
    bound = np.array([[beta(s[0], t - times[0]) for t in times] for s in series])
    return float(np.mean(series > bound * (1 + 1e-12) + 1e-300))


def sphere_points(n: int, radius: float, count: int, rng, accept=None) -> np.ndarray:
    """Random points with infinity norm exactly ``radius``."""
    out = []
    while len(out) < count:
        x = rng.uniform(-radius, radius, n)
        i = rng.integers(n)
        x[i] = radius if rng.random() < 0.5 else -radius
        if accept is None or accept(x):
            out.append(x)
    return np.array(out)


def simulate_ensemble(system: ClosedLoopSystem, starts, horizon: float, h_step: float):
    field = unprobed_field(system)
    runs = [integrate(field, x0, 0.0, horizon, h_step) for x0 in starts]
    return runs[0].t, np.stack([r.x for r in runs])


@dataclass(frozen=True)
class EnvelopeFits:
    beta_x: ExpKL
    beta_V: ExpKL
    fresh_violation_x: float
    fresh_violation_V: float
    refits: int

    def as_dict(self) -> dict:
        return {
            "beta_x": {"c1": self.beta_x.c1, "c2": self.beta_x.c2},
            "beta_V": {"c1": self.beta_V.c1, "c2": self.beta_V.c2},
            "fresh_violation_mass_x": self.fresh_violation_x,
            "fresh_violation_mass_V": self.fresh_violation_V,
            "refits": self.refits,
        }


def fit_envelopes(system: ClosedLoopSystem, cert: LyapunovCertificate, delta_x: float, horizon: float,
                  h_step: float, seed: int = 0, count: int = 20, fresh: int = 5, accept=None) -> EnvelopeFits:
    """State-norm and Lyapunov-level envelopes from unprobed runs at ``|x(0)| = delta_x``.

    Fresh out-of-ensemble runs are checked afterwards; any violation folds
    them into the ensemble and the fit is redone.
    """
    rng = np.random.default_rng(seed)
    starts = sphere_points(system.n, delta_x, count, rng, accept)
    t, X = simulate_ensemble(system, starts, horizon, h_step)
    fresh_starts = sphere_points(system.n, delta_x, fresh, rng, accept)
    _, Xf = simulate_ensemble(system, fresh_starts, horizon, h_step)

    def norms(X):
        return np.max(np.abs(X), axis=2)

    def levels(X):
        return np.array([[cert.V(x) for x in run] for run in X])

    bx = fit_kl_envelope(t, norms(X))
    bV = fit_kl_envelope(t, levels(X))
    vx = envelope_violation_mass(bx, t, norms(Xf))
    vV = envelope_violation_mass(bV, t, levels(Xf))
    refits = 0
    if vx > 0 or vV > 0:
        X = np.concatenate((X, Xf))
        bx = fit_kl_envelope(t, norms(X))
        bV = fit_kl_envelope(t, levels(X))
        refits = 1
    return EnvelopeFits(bx, bV, vx, vV, refits)


# --- perturbation robustness -----------------------------------------------------

def gronwall_check(system: ClosedLoopSystem, cert: LyapunovCertificate, d, T: float, x0, L_bar: float,
                   beta_V: ExpKL, h_step: float) -> dict:
    """Compare a perturbed run with its nominal twin from the same start.

    ``d`` is a callable ``(t, x) -> vector`` or a list of ``(t_end, callable)``
    pieces covering ``[0, T]`` (use pieces when ``d`` jumps). Checks
    ``|x - w| <= d_bar exp(L_bar T)`` and ``V(x) <= beta_V(V(x0), t) + sigma``
    with ``sigma = rho(d_bar exp(L_bar T))``.
    """
    pieces = [(T, d)] if callable(d) else list(d)
    nominal = integrate(unprobed_field(system), x0, 0.0, T, h_step)
    base = unprobed_field(system)
    x = np.asarray(x0, float)
    t_start = 0.0
    ts, xs, ds = [np.array([0.0])], [x[None, :]], []
    for t_end, dfun in pieces:
        if t_end <= t_start:
            continue
        seg = integrate(lambda z, t, dfun=dfun: base(z, t) + np.asarray(dfun(t, z), float), x, t_start, t_end, h_step)
        dv = np.array([np.asarray(dfun(t, z), float) for t, z in zip(seg.t, seg.x)])
        ds.append((seg.t, dv))
        ts.append(seg.t[1:])
        xs.append(seg.x[1:])
        x = seg.x[-1]
        t_start = t_end
    t_all = np.concatenate(ts)
    X = np.concatenate(xs)
    # cumulative trapezoid per piece, each piece using its own end values
    cum = [np.zeros(system.n)]
    acc = np.zeros(system.n)
    for tt, dv in ds:
        for i in range(1, len(tt)):
            acc = acc + 0.5 * (tt[i] - tt[i - 1]) * (dv[i] + dv[i - 1])
            cum.append(acc.copy())
    d_bar = max(inf_norm(c) for c in cum)
    bound = d_bar * math.exp(L_bar * T)
    dev = np.max(np.abs(X - nominal.x), axis=1)
    sigma = cert.rho(bound)
    V0 = cert.V(x0)
    V_series = np.array([cert.V(z) for z in X])
    V_bound = np.array([beta_V(V0, t) for t in t_all]) + sigma
    return {
        "d_bar": d_bar,
        "deviation_bound": bound,
        "max_deviation": float(np.max(dev)),
        "deviation_pass": bool(np.all(dev <= bound + 1e-15)),
        "sigma": sigma,
        "min_V_margin": float(np.min(V_bound - V_series)),
        "V_pass": bool(np.all(V_series <= V_bound + 1e-15)),
        "passed": bool(np.all(dev <= bound + 1e-15) and np.all(V_series <= V_bound + 1e-15)),
    }


# --- verdicts -------------------------------------------------------------------

def stealth_bound(cert: LyapunovCertificate, delta_x: float, beta_V: ExpKL) -> float:
    """``K_x = alpha1^-1(beta_V(alpha1(delta_x), 0) + alpha1(delta_x))``."""
    R = cert.alpha1(delta_x)
    return cert.alpha1.inv(beta_V(R, 0.0) + R)


def verify_stealth(trace: SimulationTrace, cert: LyapunovCertificate, delta_x: float, beta_V: ExpKL,
                   schedule: Optional[ProbingSchedule] = None, periods: Optional[int] = None) -> dict:
    K_x = stealth_bound(cert, delta_x, beta_V)
    if trace.escape_time is not None:
        return {"K_x": K_x, "max_norm": math.inf, "escape_time": trace.escape_time,
                "level_checks": [], "passed": False}
    max_norm = float(np.max(trace.state_norms()))
    levels = []
    if schedule is not None:
        periods = periods if periods is not None else int(round((trace.t[-1] - trace.t[0]) / schedule.T))
        for k in range(periods):
            t = schedule.probe_end(k)
            if t > trace.t[-1] + 1e-12:
                break
            v = cert.V(trace.x[trace.index_of(t)])
            levels.append({"k": k, "t": t, "V": v, "R": cert.R, "passed": v <= cert.R})
    passed = max_norm <= K_x and all(c["passed"] for c in levels)
    return {"K_x": K_x, "max_norm": max_norm, "escape_time": None, "level_checks": levels, "passed": passed}


def verify_estimation(trace: SimulationTrace, K_xtilde: float, delta_x: float, eps_xtilde: float,
                      schedule: ProbingSchedule, in_probe_bound: float, sigma_bar: float,
                      periods: Optional[int] = None) -> dict:
    """Per-period check of the end-of-probe, in-interval and end-of-period bounds.

    The end-of-period comparison uses the held estimate carried into
    ``(k+1)T``, before the observer is re-seeded. All three are strict.
    """
    if trace.xhat is None:
        raise ValueError("trace has no estimate columns")
    held = trace.xhat_held if trace.xhat_held is not None else trace.xhat
    err = np.max(np.abs(trace.xhat - trace.x), axis=1)
    err_held = np.max(np.abs(held - trace.x), axis=1)
    T = schedule.T
    periods = periods if periods is not None else int(round((trace.t[-1] - trace.t[0]) / T))
    interval_bound = max(in_probe_bound, K_xtilde + delta_x + sigma_bar)
    end_bound = K_xtilde + delta_x + eps_xtilde
    rows = []
    for k in range(periods):
        i0 = trace.index_of(k * T)
        ip = trace.index_of(schedule.probe_end(k))
        i1 = trace.index_of((k + 1) * T)
        e_probe = float(err[ip])
        e_in = float(np.max(err[i0:i1]))
        e_in_probe = float(np.max(err[i0:ip]))
        e_end = float(err_held[i1])
        rows.append({
            "k": k,
            "end_of_probe_error": e_probe,
            "end_of_probe_bound": K_xtilde,
            "end_of_probe_pass": e_probe < K_xtilde,
            "in_probe_max_error": e_in_probe,
            "in_probe_bound": in_probe_bound,
            "in_probe_pass": e_in_probe < in_probe_bound,
            "in_interval_max_error": e_in,
            "in_interval_bound": interval_bound,
            "in_interval_pass": e_in < interval_bound,
            "end_of_period_error": e_end,
            "end_of_period_bound": end_bound,
            "end_of_period_pass": e_end < end_bound,
        })
    passed = all(r["end_of_probe_pass"] and r["in_interval_pass"] and r["end_of_period_pass"] for r in rows)
    return {"period_table": rows, "passed": passed}


def lyapunov_along_trace(cert: LyapunovCertificate, trace: SimulationTrace, beta_V: Optional[ExpKL] = None,
                         sigma: Optional[float] = None, schedule: Optional[ProbingSchedule] = None,
                         tol: float = V_INCREASE_TOL) -> dict:
    """Lyapunov series, non-probing increases above ``tol`` and the per-period envelope."""
    V = np.array([cert.V(x) for x in trace.x])
    mode = trace.mode or [NON_PROBING] * len(V)
    increases = [int(i) for i in range(len(V) - 1) if mode[i] != PROBING and V[i + 1] - V[i] > tol]
    out = {"V": V, "increase_steps": increases, "decreasing": not increases}
    if beta_V is not None and schedule is not None:
        T = schedule.T
        worst = math.inf
        for i, t in enumerate(trace.t):
            k = min(int(math.floor(t / T + 1e-9)), int(round(trace.t[-1] / T)) - 1)
            i0 = trace.index_of(k * T)
            margin = beta_V(V[i0], t - k * T) + (sigma or 0.0) - V[i]
            worst = min(worst, margin)
        out["envelope_min_margin"] = float(worst)
        out["envelope_pass"] = worst >= 0
    return out
