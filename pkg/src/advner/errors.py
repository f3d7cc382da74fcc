"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes, so each class corresponds to one
failure category rather than one call site.
"""


class AdvNerError(Exception):
    """Base class for all package errors."""


class ConfigError(AdvNerError, ValueError):
    pass


class DataError(AdvNerError, ValueError):
    pass


class DimensionError(AdvNerError, ValueError):
    pass


class ContractError(AdvNerError, ValueError):
    pass


class IntegrityError(AdvNerError):
    pass


class NumericalError(AdvNerError, FloatingPointError):
    """Raised when a forward value or a loss stops being finite."""
