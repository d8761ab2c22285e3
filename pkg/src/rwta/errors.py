"""Exception hierarchy shared across the package."""


class RwtaError(Exception):
    """Base class for all package errors."""


class ShapeError(RwtaError, ValueError):
    pass


class ConfigError(RwtaError, ValueError):
    pass


class ContractError(RwtaError, ValueError):
    """A documented precondition of an operation was violated."""


class FormatError(RwtaError, ValueError):
    """Malformed binary input. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(FormatError):
    pass


class DataError(RwtaError, ValueError):
    pass


class EvaluationError(RwtaError, ArithmeticError):
    pass


class TrainingError(RwtaError, RuntimeError):
    """Raised when training cannot continue.

    ``checkpoint`` holds the last good checkpoint when one exists.
    """

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
