"""Exception hierarchy shared by every opwalk module."""

from typing import Optional


class OpwalkError(Exception):
    """Base class for all errors raised by opwalk."""


class ConfigurationError(OpwalkError, ValueError):
    """Invalid geometry or a parameter outside its documented range."""


class RangeError(OpwalkError, IndexError):
    """Access to a space-time site outside the stored slab."""


class GeometryError(OpwalkError):
    """
    A walk cone or prefactor lookback leaves the window.

    Carries a remediation hint so the CLI can tell the user what to enlarge.
    """

    def __init__(self, message: str, hint: Optional[str] = None):
        self.hint = hint or "enlarge the window (spatial_margin) or the horizon (horizon_margin)"
        super().__init__(f"{message} (hint: {self.hint})")


class CapacityError(OpwalkError):
    """Exact enumeration requested on a dependency slab that is too large."""


class DegenerateMeasureError(OpwalkError):
    """A hybrid measure has no mass to normalise (Z = 0 or an empty box)."""


class MassDriftError(OpwalkError):
    """An exact slice lost or gained more mass than the drift tolerance."""


class UnknownExperimentError(OpwalkError, KeyError):
    """The runner was asked for an experiment that is not registered."""
