"""Exception types shared across the package."""


class FlowDistillError(Exception):
    """Base class for all package-specific errors."""


class DomainError(FlowDistillError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class OrderingError(FlowDistillError, ValueError):
    """Timestep arguments violate the required ordering (e.g. t >= s)."""


class ConfigurationError(FlowDistillError):
    """A configuration value is invalid or inconsistent with the run mode."""


class SingularScoreError(FlowDistillError):
    """The score is undefined (point-mass component evaluated at zero noise)."""


class NumericDegenerateError(FlowDistillError):
    """A computation would divide by a vanishing signal coefficient."""
