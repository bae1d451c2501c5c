"""Exception types shared across the package."""


class FWBilevelError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(FWBilevelError):
    pass


class NonFiniteInput(FWBilevelError):
    pass


class EmptySupport(FWBilevelError):
    pass


class InfeasiblePoint(FWBilevelError):
    pass


class InnerSolverFailure(FWBilevelError):
    pass


class DegenerateSamples(FWBilevelError):
    pass


class NoExactChannel(FWBilevelError):
    pass


class NonPositiveGap(FWBilevelError):
    pass


class ZeroDirection(FWBilevelError):
    pass


class LineSearchFailure(FWBilevelError):
    """No admissible stepsize found; usually the Lipschitz estimate is too small."""


class InvariantViolation(FWBilevelError):
    pass


class SigmaOutOfRange(FWBilevelError):
    pass


class ParameterOutOfRange(FWBilevelError):
    pass


class DivergenceDetected(FWBilevelError):
    pass


class SingularSystem(FWBilevelError):
    pass


class PowerIterationFailure(FWBilevelError):
    pass


class NonContractiveStep(FWBilevelError):
    pass


class ConfigError(FWBilevelError):
    """Invalid run configuration (bad field value, missing key, unreadable file)."""
