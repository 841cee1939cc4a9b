"""Exception types shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 2,
data/format problems exit 3, numeric failures exit 4.
"""


class PillarMatchError(Exception):
    """Base class for all package errors."""


class FormatError(PillarMatchError):
    """Malformed input data (truncated scan, bad pose line, bad container)."""


class ShapeError(PillarMatchError):
    """Tensor or array shapes incompatible with the requested operation."""


class NumericError(PillarMatchError):
    """Non-finite values or a numerically impossible request."""


class ArgumentError(PillarMatchError, ValueError):
    """Caller passed arguments violating an operation's preconditions."""


class ConfigError(PillarMatchError):
    """Inconsistent run configuration (e.g. checkpoint/pair mismatch)."""


class DegeneratePointError(PillarMatchError):
    """Point too close to the sensor origin for the smoothness term."""


class InsufficientPointsError(PillarMatchError):
    """Cloud has too few valid points for the requested key-point count."""


class InsufficientCorrespondencesError(PillarMatchError):
    """Fewer than three point pairs for rigid-transform estimation."""


class DegenerateGeometryError(PillarMatchError):
    """Point pairs are (near-)collinear; rotation is not determined."""
