"""Exception types shared across the package.

Numerical failures are deliberately loud: a backward Riccati solve that
diverges means the problem is not solvable on the given horizon, and callers
must see that instead of silently clipped values.
"""


class MFLQGError(Exception):
    """Base class for all package errors."""


class NonFiniteError(MFLQGError):
    """A computation produced NaN/Inf or exceeded the blow-up norm bound."""


class NotSymmetricError(MFLQGError):
    """A matrix required to be symmetric exceeds the asymmetry tolerance."""


class RegularityLostError(MFLQGError):
    """R + D'PD lost strict positive definiteness along the solve."""


class GridMismatchError(MFLQGError):
    """Operands live on different time grids."""


class CouplingPresentError(MFLQGError):
    """An operation that requires F = Ftilde = 0 was called with coupling."""


class InvalidNError(MFLQGError):
    """Population size out of range for the requested operation."""


class ConfigError(MFLQGError):
    """Base class for configuration-file problems."""


class ParseError(ConfigError):
    """Config file is not valid JSON (carries line/column context)."""


class SchemaError(ConfigError):
    """Config file is valid JSON but violates the schema (names the field)."""


class NearSingularError(MFLQGError):
    """A fundamental-matrix block became numerically singular."""


class NotReducedCaseError(MFLQGError):
    """The closed-form decoupling formula only applies to the reduced case."""


class StationarityError(MFLQGError):
    """The centralized oracle failed its finite-difference stationarity check."""


class MissingTrajectoriesError(MFLQGError):
    """Full trajectories were thinned away but are required for this call."""
