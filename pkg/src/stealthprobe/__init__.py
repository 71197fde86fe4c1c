"""Stealthy state estimation of a feedback controller through sensor probing.

The package simulates a plant/controller loop, estimates the controller's
internal state either passively (when the loop is detectable) or by briefly
overriding the sensor with a known probe signal and running a high-gain
observer, and checks numerically that the attack keeps the loop bounded.
"""

from .analysis import (
    BoundConstants,
    LyapunovCertificate,
    estimate_bound_constants,
    fit_kl_envelope,
    gronwall_check,
    lyapunov_along_trace,
    verify_estimation,
    verify_stealth,
)
from .config import ScenarioConfig, load_scenario
from .detectable import ISSObserver, LinearClosedLoop, check_detectability, luenberger_gain, run_passive_estimation
from .dynamics import (
    AttackChannel,
    ClosedLoopSystem,
    ControllerModel,
    PlantModel,
    SimulationTrace,
    closed_loop_field,
    effective_output,
    integrate,
    probed_field,
)
from .highgain import (
    LiftedMatrices,
    ObservabilityMap,
    build_matrices,
    hurwitz_coefficients,
    initialize_observer,
    observer_step,
    reconstruct,
    rescale_error,
    select_theta,
    solve_lyapunov,
)
from .pipeline import run_scenario, simulate_probing
from .probing import (
    ProbeSignal,
    ProbingSchedule,
    check_stealth_feasibility,
    classify,
    probe_budget,
    probe_derivative_stack,
    select_period,
)
from .scenarios import builtin_systems

__version__ = "0.1.0"

__all__ = [
    "AttackChannel",
    "BoundConstants",
    "ClosedLoopSystem",
    "ControllerModel",
    "ISSObserver",
    "LiftedMatrices",
    "LinearClosedLoop",
    "LyapunovCertificate",
    "ObservabilityMap",
    "PlantModel",
    "ProbeSignal",
    "ProbingSchedule",
    "ScenarioConfig",
    "SimulationTrace",
    "build_matrices",
    "builtin_systems",
    "check_detectability",
    "check_stealth_feasibility",
    "classify",
    "closed_loop_field",
    "effective_output",
    "estimate_bound_constants",
    "fit_kl_envelope",
    "gronwall_check",
    "hurwitz_coefficients",
    "initialize_observer",
    "integrate",
    "load_scenario",
    "luenberger_gain",
    "lyapunov_along_trace",
    "observer_step",
    "probe_budget",
    "probe_derivative_stack",
    "probed_field",
    "reconstruct",
    "rescale_error",
    "run_passive_estimation",
    "run_scenario",
    "select_period",
    "select_theta",
    "simulate_probing",
    "solve_lyapunov",
    "verify_estimation",
    "verify_stealth",
]
