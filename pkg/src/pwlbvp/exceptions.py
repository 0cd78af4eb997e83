"""Exception types shared across the package."""


class PwlBvpError(Exception):
    """Base class for all package errors."""


class DomainError(PwlBvpError, ValueError):
    """An argument is outside the domain an operation is defined on."""


class InfeasibleDiscretization(PwlBvpError, RuntimeError):
    """No admissible state survives a boundary or transition constraint.

    ``constraint`` is one of ``"initial_boundary"``, ``"terminal_boundary"``
    or ``"transition_admissibility"``.
    """

    def __init__(self, constraint: str, message: str):
        super().__init__(message)
        self.constraint = constraint


class GuardExceeded(PwlBvpError, RuntimeError):
    """The brute-force enumeration guard was exceeded."""


class PointwiseUnavailable(PwlBvpError, RuntimeError):
    """The pointwise Newton correction is unusable (near-singular Jacobian)."""

    def __init__(self, time: float, message: str):
        super().__init__(message)
        self.time = time


class ExprError(PwlBvpError):
    """Base class for expression DSL errors."""


class ParseError(ExprError):
    def __init__(self, message: str, position: int, expected=()):
        super().__init__(f"{message} at position {position}")
        self.position = position
        self.expected = tuple(expected)


class EvalError(ExprError):
    """Checked evaluation failure (unbound variable, log(-1), x/0, ...)."""


class ConfigError(PwlBvpError):
    """Run-configuration file is missing, malformed or inconsistent."""
