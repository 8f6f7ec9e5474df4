"""Exception types shared across the toolkit."""


class InvalidInputError(ValueError):
    """Caller handed us data that violates a documented precondition."""


class InvalidStateError(RuntimeError):
    """An operation reached a state it cannot proceed from."""


class ParseError(InvalidInputError):
    """A cloud or mesh file could not be parsed.

    Carries the 1-based line number where parsing failed.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line
