"""Exception hierarchy. CLI exit codes key off these classes."""


class TwoBsdeError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TwoBsdeError):
    """Invalid configuration, grid, or precondition on inputs."""


class PreconditionError(ConfigurationError):
    pass


class DomainError(ConfigurationError):
    """Argument outside the declared domain of a map."""


class EnumerationCapError(ConfigurationError):
    def __init__(self, cap, needed):
        super().__init__(f"scenario enumeration needs {needed} members, cap is {cap}")
        self.cap = cap
        self.needed = needed


class RefusalError(ConfigurationError):
    """Flagged (out-of-bounds) family used outside demo mode."""


class NumericalError(TwoBsdeError):
    """Failure during a numerical computation."""


class EvaluationError(NumericalError):
    def __init__(self, message, inputs=None):
        super().__init__(message)
        self.inputs = inputs or {}


class SolverError(NumericalError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SimulationError(NumericalError):
    pass


class DomainExitError(NumericalError):
    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats or {}


class RefinementNeededError(NumericalError):
    """Conditional family empty at a check time; a finer level is needed."""
