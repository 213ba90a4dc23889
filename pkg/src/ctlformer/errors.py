"""Exception taxonomy shared by every module.

Each class maps to one CLI exit code, so keep the hierarchy flat: a
failure is exactly one of shape, contract, numeric, or file-integrity.
"""


class CtlformerError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(CtlformerError, ValueError):
    """Array dimensions do not line up; message names both shapes."""


class ContractError(CtlformerError, ValueError):
    """A call violates a documented precondition or config constraint."""


class NumericError(CtlformerError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class IntegrityError(CtlformerError):
    """A file is corrupt, truncated, or carries the wrong magic."""


class FormatVersionError(IntegrityError):
    """A file has valid magic but an unsupported format version."""
