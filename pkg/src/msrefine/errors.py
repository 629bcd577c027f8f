"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """A scalar parameter is outside its valid range."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, reused graph, ...)."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from its inputs."""


class DegenerateMaskError(ValueError):
    """A masked reduction was requested over an empty mask."""


class FormatError(ValueError):
    """A weight file is malformed, truncated, or of an unknown version."""


class UnsupportedVersionError(FormatError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch
