"""Exception types raised by the solvers and the reconstruction pipeline."""


class MFGError(Exception):
    """Base class; ``stage`` names the pipeline stage when known."""

    stage: str | None = None


class NonConvergence(MFGError):
    pass


class IndefiniteJacobian(MFGError):
    pass


class SingularSystem(MFGError):
    pass


class FixedPointDivergence(MFGError):
    pass


class MissingLowerOrder(MFGError):
    pass


class ZeroDirection(MFGError, ValueError):
    pass


class OverflowRisk(MFGError):
    pass


class InsufficientData(MFGError):
    pass


class IllConditioned(MFGError):
    pass


class DegenerateEverywhere(MFGError):
    pass


class InsufficientExcitation(MFGError):
    pass


class ConfigError(MFGError, ValueError):
    pass


class NegativeDensityWarning(UserWarning):
    pass
