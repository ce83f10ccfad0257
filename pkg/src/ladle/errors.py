"""Exception types raised across the package."""


class LadleError(Exception):
    """Base class for every error raised by this package."""


class InvalidParams(LadleError, ValueError):
    pass


class OutOfRange(LadleError, ValueError):
    pass


class PackingFailure(LadleError, RuntimeError):
    pass


class UnknownId(LadleError, KeyError):
    pass


class TargetLost(LadleError, RuntimeError):
    pass


class SamplingExhausted(LadleError, RuntimeError):
    pass


class BudgetExhausted(LadleError, RuntimeError):
    pass


class SchemaMismatch(LadleError, ValueError):
    pass


class ParseError(LadleError, ValueError):
    pass


class ShapeMismatch(LadleError, ValueError):
    pass


class NonFinite(LadleError, FloatingPointError):
    pass


class DegenerateCloud(LadleError, ValueError):
    pass


class InfeasibleView(LadleError, RuntimeError):
    pass


class StateUnavailable(LadleError, RuntimeError):
    pass


class SuiteMismatch(LadleError, ValueError):
    pass


class InvalidRange(InvalidParams):
    pass
