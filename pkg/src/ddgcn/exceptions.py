"""Exception types raised across the package."""


class DDGCNError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DDGCNError, ValueError):
    """Tensor extents do not line up."""


class ConfigError(DDGCNError, ValueError):
    """A hyperparameter or option is outside its valid range."""


class TopologyError(DDGCNError, ValueError):
    """A skeleton description is malformed."""


class NumericError(DDGCNError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class BoundsError(DDGCNError, IndexError):
    """A requested index range falls outside a tensor."""


class HorizonError(BoundsError):
    """An evaluation horizon lies beyond the predicted frames."""


class ParseError(DDGCNError, ValueError):
    """A SKEL1 document could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingDivergedError(DDGCNError, FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, epoch, batch, group):
        self.epoch = epoch
        self.batch = batch
        self.group = group
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch} (parameter group: {group})"
        )
