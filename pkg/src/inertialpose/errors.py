"""Exception hierarchy shared by every module."""


class InertialPoseError(Exception):
    """Base class for all package errors."""


class ContractError(InertialPoseError, ValueError):
    """A caller violated an input contract (shapes, lengths, ranges)."""


class DomainError(InertialPoseError, ValueError):
    """Input is outside the mathematical domain of an operation."""


class DegenerateGeometryError(DomainError):
    """Vectors are zero or parallel where a basis is required."""


class CalibrationError(InertialPoseError):
    """Calibration preconditions (e.g. a static window) were not met.

    ``diagnostics`` carries per-sensor details when available.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ParseError(InertialPoseError):
    """A trial or trajectory file does not match the documented schema."""


class TrialRejected(InertialPoseError):
    """Preprocessing rejected a trial (e.g. a gap longer than allowed)."""


class DivergenceError(InertialPoseError):
    """A fusion run exceeded the divergence monitor threshold."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


class ModelFault(InertialPoseError):
    """Model weights or activations became non-finite."""
