"""Exception types raised across the package."""


class ImpulseControlError(Exception):
    """Base class for all package errors."""


class InvalidModelError(ImpulseControlError, ValueError):
    pass


class DiscretizationError(ImpulseControlError, ValueError):
    def __init__(self, message, suggested_spacing=None):
        super().__init__(message)
        self.suggested_spacing = suggested_spacing


class ConvergenceError(ImpulseControlError, RuntimeError):
    """The outer fixed-point iteration did not settle.

    Carries the last iterate and its residuals so callers can inspect how far
    off the run was.
    """

    def __init__(self, message, last_iterate=None, residuals=None, iterations=0):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residuals = residuals or {}
        self.iterations = iterations


class IllPosedError(ImpulseControlError, RuntimeError):
    """Iterates blew past the divergence guard (value function not finite)."""


class ExtractionError(ImpulseControlError, RuntimeError):
    pass


class RunawayStrategyError(ImpulseControlError, RuntimeError):
    pass


class ContractViolationError(ImpulseControlError, ValueError):
    pass


class RegimeError(ImpulseControlError, ValueError):
    pass


class ConfigError(ImpulseControlError, ValueError):
    pass
