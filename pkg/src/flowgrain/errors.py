"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class FlowgrainError(Exception):
    """Base class for all package errors."""


class ConfigError(FlowgrainError):
    """Invalid or unknown configuration."""


class DataError(FlowgrainError):
    """Problems with input files, datasets or checkpoints."""


class MissingFileError(DataError):
    pass


class DecodeError(DataError):
    pass


class ChannelCountError(DataError):
    pass


class ImageTooSmallError(DataError):
    pass


class WindowTooLargeError(DataError):
    pass


class CorruptCheckpointError(DataError):
    pass


class UnsupportedVersionError(DataError):
    pass


class NumericError(FlowgrainError):
    """Numerical failures during evaluation or optimization."""


class ShapeMismatchError(NumericError):
    def __init__(self, op, shape_a, shape_b, detail=""):
        msg = f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op


class NonFiniteError(NumericError):
    """An operation produced NaN or Inf."""

    def __init__(self, where):
        super().__init__(f"non-finite value produced by {where}")
        self.where = where


class DivergenceError(NumericError):
    """Training produced no finite loss for an entire epoch."""


class DegenerateDataError(NumericError):
    """Data has lower numerical rank than the requested decomposition."""


class UnsupportedOperationError(FlowgrainError):
    """Requested operation is not defined for this model kind."""
