"""
Exception hierarchy.

Every error that should reach the command line derives from RetrofitError and
carries the process exit code the CLI reports for it:

- 1: usage errors (bad flags, bad config values)
- 2: data errors (malformed or missing files, unknown sources)
- 3: numerical aborts (NaN/Inf, diverging optimisation)
"""


class RetrofitError(Exception):
    """Base class for errors surfaced to the user."""

    exit_code = 2


class UsageError(RetrofitError):
    """Invalid command-line flag or configuration value."""

    exit_code = 1


class DataError(RetrofitError):
    """Input data could not be used."""

    exit_code = 2


class DatabaseFormatError(DataError):
    """A database or targets file does not follow the rf-1 schema."""

    def __init__(self, path: str, where: str, message: str):
        self.path = path
        self.where = where
        super().__init__(f"{path}: {where}: {message}")


class SchemaVersionError(DataError):
    """The file declares a schema version this package cannot read."""


class EmptyDatabase(DataError):
    """A source database with no shapes."""


class MissingCheckpoint(DataError):
    """A checkpoint file the run needs does not exist."""


class UnknownSource(DataError, KeyError):
    """A source id or name that is not in the database."""

    def __str__(self) -> str:
        return Exception.__str__(self)


class NumericalAbort(RetrofitError):
    """Training or fitting produced a non-finite or exploding value."""

    exit_code = 3

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DivergenceError(NumericalAbort):
    """Inner deformation optimisation exceeded its loss ceiling."""


class StaleCacheError(RuntimeError):
    """A forward cache was used after the parameters it depends on changed."""
