"""Exception hierarchy. Every domain failure derives from ConformalShapleyError."""


class ConformalShapleyError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class DataError(ConformalShapleyError):
    pass


class LearnerError(ConformalShapleyError):
    pass


class AttributionError(ConformalShapleyError):
    pass


class QuantileFitError(ConformalShapleyError):
    def __init__(self, message, objective=None, grad_norm=None):
        super().__init__(message)
        self.objective = objective
        self.grad_norm = grad_norm


class StageError(ConformalShapleyError):
    """Wraps a failure inside the interval pipeline with the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class ConfigError(Exception):
    """Invalid or incomplete run configuration (CLI exit code 2)."""
