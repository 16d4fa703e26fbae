"""Exception taxonomy shared by every module.

The CLI maps these onto exit codes: input/schema/config problems exit 1,
numerical failures exit 2 (self-test failures exit 3 on their own).
"""


class Stg2SeqError(Exception):
    """Base class for all errors raised by this package."""


class InputError(Stg2SeqError):
    """Malformed or inconsistent input data (files, series, shapes of user data)."""


class ConfigError(Stg2SeqError):
    """Invalid configuration value or constraint violation."""


class DimensionError(Stg2SeqError):
    """Tensor shapes incompatible with the requested operation."""


class NumericalError(Stg2SeqError):
    """NaN/Inf encountered, or an optimization diverged."""
