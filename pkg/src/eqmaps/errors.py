"""Exception hierarchy shared by the numerical modules and the CLI."""


class ConfigurationError(ValueError):
    """Invalid parameters or unsupported options (CLI exit code 2)."""


class DomainError(ValueError):
    """Input field violates a pointwise precondition (unit length, tangency)."""


class OutOfRegimeError(RuntimeError):
    """Data is too far from the harmonic-map orbit for the perturbative tools (exit 3)."""


class NumericalError(RuntimeError):
    """A solver or integrator failed (exit 4)."""


class ConvergenceError(NumericalError):
    def __init__(self, message, residual=None, trace=None):
        super().__init__(message)
        self.residual = residual
        self.trace = list(trace) if trace is not None else []
