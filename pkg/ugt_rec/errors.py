"""Exception types shared across the package.

The CLI turns these into exit codes (`cli.EXIT_USAGE` for configuration and
contract errors, `cli.EXIT_DATA` for data errors, `cli.EXIT_FAILURE` otherwise).
"""


class UGTError(Exception):
    """Base class for every error raised on purpose by ugt_rec."""


class ShapeError(UGTError, ValueError):
    """Operand dimensions do not agree."""


class ContractError(UGTError):
    """A precondition of an operation was violated by the caller."""


class ConfigurationError(UGTError, ValueError):
    """A configuration value is out of range or inconsistent."""


class DataFormatError(UGTError):
    """A file or raw input does not follow the expected layout."""

    def __init__(self, message: str, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ReferentialIntegrityError(DataFormatError):
    """An id points past the tables it refers to."""


class DivergenceError(UGTError):
    """Training produced a non-finite loss."""


class ReportError(UGTError):
    """A metrics report cannot be assembled (for example, nobody to evaluate)."""
