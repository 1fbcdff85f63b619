"""
Exception hierarchy for odmrsim.

Input problems (bad configuration, malformed files, wrong shapes) derive from
ValueError; numerical failures (singular generators, non-converging fits)
derive from RuntimeError. The CLI maps the two families to exit codes 2 and 3.
"""

from typing import Optional


class OdmrSimError(Exception):
    """Base class for every error raised by odmrsim."""


class ConfigError(OdmrSimError, ValueError):
    """A parameter violates its type invariants."""


class InputError(OdmrSimError, ValueError):
    """An input file could not be parsed."""


class DimensionMismatch(OdmrSimError, ValueError):
    """Operands have incompatible shapes."""


class NotHermitian(OdmrSimError, ValueError):
    """A matrix expected to be Hermitian is not, within tolerance."""


class NumericalError(OdmrSimError, RuntimeError):
    """A numerical procedure failed."""


class DegenerateSteadyState(NumericalError):
    """The Liouvillian null space has dimension larger than one."""


class StepTooLarge(NumericalError):
    """The integration step violates the RK4 stability bound."""


class FitError(NumericalError):
    """Base class for fitting failures."""


class FitFailed(FitError):
    def __init__(self, message: str, iterations: int = 0, delta_deg: Optional[float] = None):
        super().__init__(message)
        self.iterations = iterations
        self.delta_deg = delta_deg

    def __str__(self) -> str:
        msg = super().__str__()
        if self.delta_deg is not None:
            msg += f" (delta = {self.delta_deg:g} deg)"
        return msg


class FlatSpectrum(FitError):
    """The spectrum carries no signal to fit."""


class WingsContainPeak(FitError):
    """The wings used for the background line contain resonance signal."""


class ZeroTotalArea(FitError):
    """Both fitted Lorentzian areas vanish."""
