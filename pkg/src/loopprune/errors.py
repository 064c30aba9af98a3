"""Exception hierarchy shared across the package."""


class LoopPruneError(Exception):
    """Base class for all loopprune errors."""


class DimensionError(LoopPruneError, ValueError):
    """Tensor or array shapes do not satisfy an operation's contract."""


class ConfigError(LoopPruneError, ValueError):
    """Invalid configuration value, file, or command usage."""


class GraphError(LoopPruneError, RuntimeError):
    """Autodiff state error, e.g. backward() without a recorded forward."""


class NumericError(LoopPruneError, ArithmeticError):
    """Non-finite value encountered where the contract requires finiteness."""


class PlanError(LoopPruneError, ValueError):
    """A structured-pruning plan references invalid channels or would
    empty a layer."""


class CurveError(LoopPruneError, ValueError):
    """A rate-distortion curve is unusable: too few points, non-monotone,
    or no overlap with the curve it is compared against."""


class CheckpointError(LoopPruneError):
    """Base class for model checkpoint I/O failures."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint format version is not supported by this build."""


class TruncatedFileError(CheckpointError):
    """Checkpoint payload ends before all declared arrays are read."""
