"""
Error Types

Exceptions raised by the service layer. Stage runners catch HeatriskError,
record the failure in the run registry and the CLI reports it as JSON.
"""

from typing import Optional


class HeatriskError(Exception):
    """Base class for every error raised by the pipeline."""

    code = "heatrisk_error"

    def __init__(self, message: str, detail: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.detail = detail


class ValidationError(HeatriskError):
    """Invalid input, configuration or precondition."""

    code = "validation_error"


class DataError(HeatriskError):
    """Input data that cannot support the requested computation."""

    code = "data_error"


class NumericalError(HeatriskError):
    """Non-finite values or failed factorizations."""

    code = "numerical_error"


class ConvergenceError(HeatriskError):
    """Optimizer or sampler did not converge."""

    code = "convergence_error"

    def __init__(self, message: str, detail: Optional[str] = None, trace: Optional[list] = None):
        super().__init__(message, detail)
        self.trace = trace or []


class MissingArtifactError(HeatriskError):
    """A stage input has not been produced yet."""

    code = "missing_artifact"

    def __init__(self, artifact: str, detail: Optional[str] = None):
        super().__init__(f"Missing artifact: {artifact}", detail)
        self.artifact = artifact
