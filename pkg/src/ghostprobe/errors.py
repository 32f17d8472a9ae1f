"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit 2,
runtime failures (numerics, I/O) exit 1.
"""


class GhostProbeError(Exception):
    """Base class for package errors."""


class ShapeError(GhostProbeError, ValueError):
    """Operands have incompatible or invalid extents."""


class DomainError(GhostProbeError, ValueError):
    """Values outside an operation's valid domain."""


class NumericsError(GhostProbeError, ArithmeticError):
    """A forward op produced NaN/Inf from finite inputs."""

    def __init__(self, op_name, message=None):
        self.op_name = op_name
        super().__init__(message or f"non-finite values produced by op '{op_name}'")


class EmptyCloudError(GhostProbeError, ValueError):
    """A depth frame contained no valid pixels to back-project."""


class ConfigError(GhostProbeError, ValueError):
    """Invalid or unparseable run configuration."""


class SceneSpecError(GhostProbeError, ValueError):
    """A synthetic scene specification is geometrically invalid."""
