"""Exception types shared across the package."""


class HeatRiskError(Exception):
    pass


class ParseError(HeatRiskError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConflictError(HeatRiskError):
    """Two rows claim the same (site, time) entry."""


class SchemaError(HeatRiskError):
    """Input violates a structural invariant (e.g. gaps in a climate grid)."""


class ConvergenceError(HeatRiskError):
    """An optimizer stopped without meeting its tolerance.

    Carries the last iterate and a gradient (or subgradient) norm so callers
    can decide whether the point is usable.
    """

    def __init__(self, message, x=None, grad_norm=None):
        self.x = x
        self.grad_norm = grad_norm
        super().__init__(f"{message} (grad_norm={grad_norm})")


class CrossingError(HeatRiskError):
    """Fitted quantiles fail to increase over the tau grid."""

    def __init__(self, message, t=None, s=None, tau=None):
        self.t, self.s, self.tau = t, s, tau
        super().__init__(message)


class MarginError(HeatRiskError):
    """Observed values sit at or beyond the fitted upper endpoint."""

    def __init__(self, message, entries=None):
        self.entries = entries if entries is not None else []
        super().__init__(message)


class StageError(HeatRiskError):
    """A pipeline stage is missing an upstream artifact or has bad config."""


class InsufficientDataError(HeatRiskError, ValueError):
    """Too few observations for a fit to be meaningful."""


class CollinearityError(HeatRiskError, ValueError):
    """Design matrix is numerically rank deficient."""
