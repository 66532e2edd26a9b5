"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class XcmixError(Exception):
    pass


class ConfigError(XcmixError):
    """Bad run configuration: unknown keys, invalid values, missing paths."""


class DataError(XcmixError):
    """Malformed dataset files or out-of-range ids."""


class NumericalError(XcmixError):
    """Non-finite values where finite ones are required."""
