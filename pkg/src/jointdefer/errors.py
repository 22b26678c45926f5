"""Exception hierarchy shared by every module."""


class JointDeferError(Exception):
    pass


class InvalidArgumentError(JointDeferError, ValueError):
    pass


class StateError(JointDeferError, RuntimeError):
    """Raised when an operation is invoked in the wrong lifecycle state."""


class TrainingDivergenceError(JointDeferError, RuntimeError):
    """Non-finite loss or gradient during optimization."""


class ParseError(JointDeferError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigurationError(JointDeferError, ValueError):
    pass


class SignalValidationError(JointDeferError, ValueError):
    """A reward signal violates non-negativity or the unit-sum constraint."""

    def __init__(self, message: str, constraint: str):
        self.constraint = constraint
        super().__init__(message)


class CheckpointError(JointDeferError, IOError):
    pass
