"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class InvalidShapeError(ContractError):
    """Tensor shapes are incompatible with the requested operation."""


class FormatError(ValueError):
    """A binary file does not match its expected layout.

    ``offset`` is the byte position at which decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ContractError):
    """A run configuration key is unknown, mistyped or out of range."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class DivergenceError(RuntimeError):
    """Training produced a non-finite or runaway loss."""

    def __init__(self, message, *, iteration=None, epsilon=None):
        super().__init__(message)
        self.iteration = iteration
        self.epsilon = epsilon
