"""Exception hierarchy shared across the package."""


class MugError(Exception):
    """Base class for every error raised by this package."""


class ContractError(MugError, ValueError):
    """A documented precondition of an operation was violated."""


class ShapeError(ContractError):
    pass


class EmptyInputError(ContractError):
    pass


class StaleTapeError(MugError, RuntimeError):
    pass


class DeterminismError(MugError, RuntimeError):
    pass


class ParseError(MugError, ValueError):
    def __init__(self, message: str, lineno: int | None = None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if lineno is not None:
            where += f":{lineno}" if where else f"line {lineno}"
        super().__init__(f"{where}: {message}" if where else message)
        self.lineno = lineno
        self.path = path


class StructureError(MugError, ValueError):
    """Input parsed but is structurally inconsistent (e.g. mixed dimensionality)."""


class CheckpointError(MugError, ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint format version {found!r} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


class NumericError(MugError, FloatingPointError):
    """Non-finite values appeared where finite ones are required."""
