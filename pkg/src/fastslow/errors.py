"""Exception taxonomy.

Every failure path in the toolkit maps to exactly one category string; the
CLI surfaces the category machine-readably and uses it for the exit code.
"""

from __future__ import annotations


class ToolError(Exception):
    """Base class for all toolkit errors.

    ``category`` is a stable machine-readable identifier; ``provenance``
    records where the error arose (module, operation, offending parameters).
    """

    category = "internal"

    def __init__(self, message: str, **provenance):
        super().__init__(message)
        self.provenance = provenance


class ConfigError(ToolError):
    category = "config-invalid"


class FileFormatError(ToolError):
    category = "file-format"


class IntegrationDivergedError(ToolError):
    category = "integration-diverged"

    def __init__(self, kind: str, step_index: int, message: str = ""):
        detail = message or f"non-finite state in driver '{kind}' at step {step_index}"
        super().__init__(detail, kind=kind, step_index=step_index)


class NearSingularError(ToolError):
    """Violation of the diffeomorphism assumption: Id + grad(zeta) close to singular."""

    category = "near-singular"


class StepSizeGuardError(ToolError):
    category = "step-size-guard"


class TooFewSamplesError(ToolError):
    category = "too-few-samples"


class InsufficientLagsError(ToolError):
    category = "insufficient-lags"


class NotPsdError(ToolError):
    """Estimated diffusion matrix has a genuinely negative eigenvalue (estimator failure)."""

    category = "not-psd"


class DimensionMismatchError(ToolError):
    category = "dimension-mismatch"


class MisalignedBatchError(ToolError):
    category = "misaligned-batches"


class ExtrapolationError(ToolError):
    """Coefficient field queried outside the probe lattice hull."""

    category = "extrapolation"
