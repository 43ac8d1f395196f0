"""Exception kinds shared across the package.

The CLI maps each family to its own exit code, so new errors should subclass
one of these rather than raising bare ``ValueError``.
"""


class EgocrashError(Exception):
    exit_code = 1


class ContractViolation(EgocrashError, ValueError):
    """Inputs break a shape or pairing contract."""

    exit_code = 2


class StepRangeError(EgocrashError, IndexError):
    """A diffusion step or layer index lies outside its valid range."""

    exit_code = 2


class ConfigError(EgocrashError, ValueError):
    exit_code = 3


class DegenerateInputError(EgocrashError, ValueError):
    """Zero-norm vectors where a direction is required."""

    exit_code = 5


class ChainError(EgocrashError, RuntimeError):
    """Stage checkpoint chain is broken or mismatched."""

    exit_code = 4


class NumericError(EgocrashError, ArithmeticError):
    exit_code = 5


class DataError(EgocrashError, OSError):
    exit_code = 6


class ManifestNotFound(DataError, FileNotFoundError):
    pass


class MalformedRecord(DataError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"record {index}: {reason}")
        self.index = index


class DanglingPath(DataError):
    def __init__(self, index: int, path: str):
        super().__init__(f"record {index}: path does not exist: {path}")
        self.index = index
        self.path = path
