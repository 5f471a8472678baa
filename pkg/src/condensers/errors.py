"""Exception types shared across the package."""


class CondenserError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(CondenserError, ValueError):
    pass


class InfeasibleError(CondenserError):
    """The admissible class is empty, or a measure violates a hard support restriction."""


class KernelError(CondenserError):
    """Kernel/geometry incompatibility or an eigen-iteration that failed to converge."""


class NonPsdError(CondenserError):
    pass


class NonConvergenceError(CondenserError):
    """Raised when an iterative routine cannot reach its tolerance.

    ``best`` carries the best iterate found so far, when one exists.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DegenerateMeasureError(CondenserError):
    pass


class ConfigError(CondenserError):
    """A run configuration failed to parse or validate; ``field`` names the offender."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field
