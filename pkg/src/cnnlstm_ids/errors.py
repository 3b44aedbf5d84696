"""Exception hierarchy.

The CLI maps these onto exit codes: usage/config problems exit 1, data
problems exit 2, numeric divergence exits 3.
"""


class IdsError(Exception):
    """Base class for every error raised by this package."""


# -- shapes and numerics -------------------------------------------------

class DimensionError(IdsError, ValueError):
    """Operand shapes do not line up."""


class ParameterError(IdsError, ValueError):
    """A scalar argument is outside its valid range."""


class NonFiniteError(IdsError, ArithmeticError):
    """An operation produced NaN or infinity."""


class UsageError(IdsError, RuntimeError):
    """An API was called out of order (e.g. a layer cache consumed twice)."""


class ConfigError(IdsError, ValueError):
    """An architecture, training or run configuration is invalid."""


class DivergenceError(IdsError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


# -- data ----------------------------------------------------------------

class DataError(IdsError, ValueError):
    """Base class for dataset problems."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingColumnError(ParseError):
    def __init__(self, column: str):
        super().__init__(f"label column {column!r} not found in header")
        self.column = column


class EmptyDatasetError(DataError):
    pass


class SchemaError(DataError):
    pass


class LabelError(DataError):
    pass


class StratificationError(DataError):
    pass


# -- model files ---------------------------------------------------------

class ModelFormatError(IdsError):
    """Base class for model-file load failures."""


class BadMagicError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    def __init__(self, found: int, supported: int):
        super().__init__(f"model file version {found} is not supported (this build reads version {supported})")
        self.found = found
        self.supported = supported


class TruncatedFileError(ModelFormatError):
    pass


class ShapeMismatchError(ModelFormatError):
    pass
