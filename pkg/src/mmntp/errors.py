"""Exception hierarchy shared by the library and the CLI.

Every error class carries the process exit code the CLI maps it to:
0 ok, 2 config error, 3 data error, 4 numerical failure.
"""


class MmntpError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(MmntpError, ValueError):
    """Invalid or inconsistent configuration values."""

    exit_code = 2


class DataError(MmntpError):
    """Missing files, schema mismatches, or unusable input data."""

    exit_code = 3


class NumericalError(MmntpError):
    """Non-finite values or failed numerical procedures."""

    exit_code = 4


class MultipleTransitionsInPeriod(DataError):
    """More than one manoeuvre transition falls inside one change period.

    Signals that the change-period length is too large for the sample;
    dataset builders drop such samples and log them.
    """


class InfeasibleSceneConfig(ConfigError):
    """Scene generation cannot satisfy the requested configuration."""


class FrenetRangeError(DataError):
    """A point projects beyond the extent of the reference centerline."""
