"""Exception hierarchy.

Configuration problems and numerical failures are kept apart so the command
line can map them to distinct exit codes.
"""


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericalError(RuntimeError):
    """Base class for failures raised by the numerical routines."""


class RateOverflowError(NumericalError, OverflowError):
    """A jump rate was requested at a pressure where it overflows."""


class APrioriBoundError(NumericalError):
    """A simulated pressure broke one of the pathwise a priori bounds."""


class DominatingRateError(NumericalError):
    """A thinning bound was exceeded by the rate it is supposed to dominate."""


class PicardConvergenceError(NumericalError):
    """The Picard iteration failed to reach its tolerance."""

    def __init__(self, message: str, residuals):
        self.residuals = residuals
        super().__init__(message)


class QuadratureError(NumericalError):
    """An adaptive integral did not converge (or diverged)."""


class GammaScanError(NumericalError):
    """The fixed-point scan range is too small to bracket a root."""
