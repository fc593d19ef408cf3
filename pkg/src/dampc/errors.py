"""Exception types shared across the package."""


class DampcError(Exception):
    """Base class for all package errors."""


class InfeasibleSet(DampcError):
    pass


class Unbounded(DampcError):
    pass


class DimensionMismatch(DampcError, ValueError):
    pass


class DimensionTooLarge(DampcError):
    pass


class DegenerateFace(UserWarning):
    """More than ``dim`` hyperplanes active at a vertex (reported, not fatal)."""


class NotConverged(DampcError):
    pass


class EmptyInterior(DampcError):
    pass


class RedesignNeeded(DampcError):
    """The offline disturbance-margin test failed; ``margin`` is the violated amount."""

    def __init__(self, message, margin):
        super().__init__(message)
        self.margin = margin


class InconsistentData(DampcError):
    """Parameter set update produced an empty set."""


class ControllerInfeasible(DampcError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SetpointUnderdetermined(UserWarning):
    pass


class ConfigError(DampcError):
    pass


class ParseError(ConfigError):
    def __init__(self, message, line=None, field=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.line = line
        self.field = field


class ValidationError(ConfigError):
    """Carries every violation found, not only the first."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
