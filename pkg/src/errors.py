"""Exception hierarchy shared by every engine module."""

from typing import Optional, Sequence, Tuple

# Process exit codes used by the command-line surface.
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class EmpathyError(Exception):
    """Base class for all engine errors."""

    exit_code = EXIT_USAGE


class DimensionError(EmpathyError):
    """Shape mismatch between operands."""

    exit_code = EXIT_DATA

    def __init__(
        self,
        message: str,
        shapes: Sequence[Tuple[int, ...]] = (),
        stage: Optional[str] = None,
    ):
        self.shapes = tuple(tuple(s) for s in shapes)
        self.stage = stage
        detail = message
        if self.shapes:
            detail += " (shapes: " + ", ".join(str(s) for s in self.shapes) + ")"
        if stage:
            detail = f"[{stage}] {detail}"
        super().__init__(detail)


class PreconditionError(EmpathyError):
    """An operation was called outside its contract."""


class NonFiniteError(PreconditionError):
    """An operation received NaN or infinite entries."""


class StaleTapeError(EmpathyError):
    """Backward was requested on a tape that has already been consumed."""

    exit_code = EXIT_NUMERIC


class DeterminismError(EmpathyError):
    """Two evaluations of the same forward pass disagreed."""

    exit_code = EXIT_NUMERIC


class DivergenceError(EmpathyError):
    """A loss or gradient became non-finite."""

    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, epoch: Optional[int] = None, batch: Optional[int] = None):
        self.epoch = epoch
        self.batch = batch
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if batch is not None:
            where.append(f"batch {batch}")
        if where:
            message = f"{message} at {', '.join(where)}"
        super().__init__(message)


class ConfigurationError(EmpathyError):
    """Invalid run configuration."""


class DataError(EmpathyError):
    """Problems with dataset content."""

    exit_code = EXIT_DATA


class DatasetParseError(DataError):
    """A dataset line could not be parsed."""

    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


class SchemaError(DataError):
    """A record does not conform to the declared schema."""

    def __init__(self, message: str, field: str, line: Optional[int] = None):
        self.field = field
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}field '{field}': {message}")


class LabelError(DataError):
    """An empathy label lies outside {0, 1, 2}."""


class EmptyDatasetError(DataError):
    """A dataset holds no samples."""


class LdaError(EmpathyError):
    """Topic-model contract violations."""

    exit_code = EXIT_DATA


class EmptyAfterFilterError(LdaError):
    """A document is empty once unknown tokens are dropped."""
