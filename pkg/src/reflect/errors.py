"""Exception types shared across the package."""


class ReflectError(Exception):
    """Base class for all package errors."""


class NonPositiveX(ReflectError, ValueError):
    pass


class DegenerateRadialDirection(ReflectError, ValueError):
    pass


class NotOnBoundary(ReflectError, ValueError):
    pass


class NotPositiveDefinite(ReflectError, ValueError):
    pass


class BetaOutOfRange(ReflectError, ValueError):
    pass


class ReflectionFailed(ReflectError, RuntimeError):
    pass


class OriginGuardHit(ReflectError, RuntimeError):
    pass


class NonPositiveStart(ReflectError, ValueError):
    pass


class WindowExceedsHorizon(ReflectError, ValueError):
    pass


class InsufficientSamples(ReflectError, ValueError):
    pass


class ConfigError(ReflectError, ValueError):
    pass


class MissingArtifacts(ReflectError, FileNotFoundError):
    pass


class SimulationError(ReflectError, RuntimeError):
    """A path failed; carries the path index and the simulated time of failure."""

    def __init__(self, message, path_index=None, time=None, cause=None):
        super().__init__(message)
        self.path_index = path_index
        self.time = time
        self.cause = cause
