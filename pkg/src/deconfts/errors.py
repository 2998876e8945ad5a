"""Exception hierarchy shared by every module of the package."""


class DeconfError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(DeconfError, ValueError):
    pass


class ShapeError(DeconfError, ValueError):
    pass


class ConfigError(DeconfError, ValueError):
    """A configuration value is missing, unknown or out of bounds."""


class TrainingDivergenceError(DeconfError, RuntimeError):
    """A loss, gradient or parameter became non-finite."""


class EvaluationError(DeconfError, RuntimeError):
    pass


class ParseError(DeconfError, ValueError):
    """A file row does not conform to its schema.

    ``path``, ``line`` and ``column`` locate the offending cell when known.
    """

    def __init__(self, message, path=None, line=None, column=None):
        self.path = path
        self.line = line
        self.column = column
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")


class DatasetInvariantError(DeconfError, ValueError):
    pass


class InsufficientDataError(DeconfError, ValueError):
    pass


class CheckpointError(DeconfError, ValueError):
    """Checkpoint is truncated, has the wrong schema or the wrong architecture."""
