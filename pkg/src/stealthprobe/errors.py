"""Exception hierarchy.

Every error carries a short machine-readable ``code`` that ends up in the
JSON report, plus the CLI exit status it maps to.
"""


class StealthProbeError(Exception):
    code = "error"
    exit_status = 4


class ModelEvaluationError(StealthProbeError):
    """A model callable returned something non-finite."""

    code = "model_evaluation"

    def __init__(self, callable_name, message=None):
        self.callable_name = callable_name
        super().__init__(message or f"non-finite output from {callable_name}")


class FiniteEscapeError(StealthProbeError):
    """State norm crossed the escape bound during integration."""

    code = "finite_escape"
    exit_status = 2

    def __init__(self, time, trace=None):
        self.time = time
        self.trace = trace
        super().__init__(f"state escaped at t={time:.6g}")


class DesignError(StealthProbeError):
    code = "design"


class DetectabilityError(DesignError):
    code = "not_detectable"


class EstimatorDivergenceError(StealthProbeError):
    code = "estimator_divergence"


class ReconstructionError(StealthProbeError):
    code = "reconstruction_singularity"


class CertificateDomainError(StealthProbeError):
    code = "certificate_domain"


class StabilityViolationError(StealthProbeError):
    code = "stability_violation"


class InfeasibleError(StealthProbeError):
    """Parameter selection has no admissible solution.

    ``binding`` names the constraint that could not be met.
    """

    code = "infeasible"
    exit_status = 3

    def __init__(self, message, binding, audit=None):
        self.binding = binding
        self.audit = audit or {}
        super().__init__(message)


class ConfigError(StealthProbeError):
    code = "config"

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
