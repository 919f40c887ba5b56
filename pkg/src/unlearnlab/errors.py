"""Exception types shared across the package.

The CLI maps these onto exit codes: usage/IO problems exit 1,
NumericalError exits 2, validation failures exit 3.
"""


class UnlearnLabError(Exception):
    """Base class for all package-specific errors."""


class InvalidInput(UnlearnLabError):
    """An argument violates a documented precondition."""


class SequenceTooShort(InvalidInput):
    """A token sequence is shorter than the operation requires."""


class SequenceTooLong(InvalidInput):
    """A token sequence exceeds the model context length."""


class NumericalError(UnlearnLabError):
    """A non-finite value appeared where the math requires finite numbers."""


class CheckpointError(InvalidInput):
    """A checkpoint file is malformed or inconsistent with its header."""
