"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so each class belongs to exactly one
exit-code family (see ``slap.cli``).
"""


class SlapError(Exception):
    """Base class for all package errors."""


class DimensionError(SlapError, ValueError):
    """Incompatible tensor shapes."""


class RankError(SlapError, ValueError):
    """Tensor has the wrong number of dimensions for the operation."""


class DegenerateNormError(SlapError, ValueError):
    """A vector norm fell below the strict-mode epsilon."""


class TapeError(SlapError, RuntimeError):
    """A tensor refers to a tape node that no longer exists."""


class SpecError(SlapError, ValueError):
    """Inconsistent architecture or generator specification."""


class BatchSizeError(SlapError, ValueError):
    """Batch too small for the requested computation."""


class StructuralError(SlapError, ValueError):
    """Two parameter sets or inputs do not line up."""


class ContractError(SlapError, RuntimeError):
    """A caller broke an autodiff contract (e.g. a target that carries gradient)."""


class CorruptCheckpointError(SlapError, ValueError):
    pass


class CheckpointVersionError(SlapError, ValueError):
    pass


class DataError(SlapError, ValueError):
    """Malformed or inconsistent dataset contents."""


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnsupportedError(SlapError, ValueError):
    """Operation not available for this model kind (e.g. q anchors on CLAP)."""


class ConfigError(SlapError, ValueError):
    """Invalid configuration file or field."""
