"""Exception taxonomy shared by the library and the CLI exit-code mapping."""


class InsteditError(Exception):
    """Base class; carries the process exit code the CLI reports."""

    exit_code = 1


class ConfigError(InsteditError):
    """Bad configuration: unknown keys, out-of-range values, missing settings."""

    exit_code = 2


class DataError(InsteditError):
    """Bad input data: missing files, shape mismatches, overlapping masks."""

    exit_code = 3


class NumericsError(InsteditError):
    """A numerical contract was violated at run time."""

    exit_code = 4
