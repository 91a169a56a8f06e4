"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: configuration errors exit 2,
data and I/O errors exit 3, numeric failures exit 4. Contract errors are
programming mistakes and are allowed to surface as tracebacks.
"""


class PyradiffError(Exception):
    """Base class for all package-specific errors."""


class ContractError(PyradiffError, ValueError):
    """A call violated a documented precondition."""


class ShapeError(ContractError):
    """Operands have incompatible shapes; message names both."""


class ConfigurationError(PyradiffError, ValueError):
    """Invalid or inconsistent run configuration. CLI exit code 2."""


class DataIOError(PyradiffError, OSError):
    """Dataset, image, or checkpoint I/O failure. CLI exit code 3."""


class PgmParseError(DataIOError):
    """Malformed PGM stream; message includes the byte offset."""


class CheckpointCorruptionError(DataIOError):
    """Checkpoint container failed an integrity check."""


class CheckpointVersionError(DataIOError):
    """Checkpoint container version is not supported."""


class DegenerateInputError(DataIOError):
    """Statistical routine received input with no usable variation."""


class NumericFailure(PyradiffError, ArithmeticError):
    """NaN or non-finite value where finite math is required. CLI exit code 4."""
