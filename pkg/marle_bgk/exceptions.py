"""
Marle BGK - Error Hierarchy

Every failure raised by the package derives from MarleError so the CLI can
map it to an exit code with a readable message.
"""
from typing import Any, Dict, Optional


class MarleError(Exception):
    """Base class for all solver and analysis errors."""

    exit_code = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def __str__(self) -> str:
        if not self.details:
            return self.message
        extra = ", ".join(f"{key}={value}" for key, value in self.details.items())
        return f"{self.message} ({extra})"


class ConfigurationError(MarleError):
    """Invalid run configuration or unknown preset/command."""

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        if field is not None:
            details.setdefault("field", field)
        super().__init__(message, details)
        self.field = field


class GridError(ConfigurationError):
    """Grid cutoffs or node counts cannot support the requested equilibrium."""


class NonFiniteInputError(MarleError):
    """A field handed to a quadrature or moment routine holds NaN or inf."""


class GammaRangeError(MarleError):
    """Requested eta lies outside the range reachable on the gamma bracket."""


class DegenerateMomentsError(MarleError):
    """Particle flux is not timelike, so n and u are undefined."""


class InadmissibleStateError(MarleError):
    """A macrostate produces u^mu p_mu <= 0 on some grid node."""


class SmallDataError(MarleError):
    """Perturbation left the region where the nonlinear decomposition exists."""


class ConvergenceError(MarleError):
    """An iterative solver (moment matching, eigensolver, Duhamel) failed."""


class SimulationAborted(MarleError):
    """A run guard (blow-up, storage) stopped the time integration."""


class DecayFitError(MarleError):
    """Too few positive energy samples in the fit window."""
