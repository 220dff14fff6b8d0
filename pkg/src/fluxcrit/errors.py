"""Exception hierarchy shared by the library and the CLI."""


class FluxCritError(Exception):
    """Base class for every error raised by fluxcrit."""


class ConfigError(FluxCritError, ValueError):
    """Invalid user input; the CLI maps this to exit code 2."""


# field
class EvalAtSingularity(FluxCritError):
    pass


class OutOfBounds(FluxCritError):
    pass


class GridFormatError(FluxCritError):
    pass


class BadMagic(GridFormatError):
    pass


class TruncatedPayload(GridFormatError):
    pass


class NonPositiveSpacing(GridFormatError):
    pass


# tracer
class SeedOutOfRange(FluxCritError, ValueError):
    pass


class TraceAborted(FluxCritError):
    pass


# spheremesh
class LevelTooLarge(FluxCritError, ValueError):
    pass


# entryset / fluxtube / criterion
class BadRadii(ConfigError):
    pass


class PatchNotEntirelyCaptured(FluxCritError):
    def __init__(self, message, seeds=None):
        super().__init__(message)
        self.seeds = seeds


class PatchesOverlap(FluxCritError, ValueError):
    pass


class DegenerateMantle(FluxCritError):
    pass


class MeshMismatch(FluxCritError, ValueError):
    pass
