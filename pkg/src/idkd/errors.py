"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class ParseError(InvalidInputError):
    """A data file is malformed.

    ``offset`` is a byte offset for binary formats, ``line`` a 1-based line
    number for text formats.
    """

    def __init__(self, message, *, path=None, offset=None, line=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.path = path
        self.offset = offset
        self.line = line


class ConfigError(InvalidInputError):
    """An experiment configuration is invalid; ``key`` is the dotted key path."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class NumericalError(ArithmeticError):
    """A computation produced NaN or Inf."""


class ConvergenceError(RuntimeError):
    """An iterative routine hit its iteration cap."""


class TransportError(RuntimeError):
    """A simulated message could not be delivered."""
