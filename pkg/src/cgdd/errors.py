"""Exception types raised across the package."""


class CGDDError(Exception):
    """Base class for every error raised by :mod:`cgdd`."""

    code = "cgdd_error"


class DimensionError(CGDDError, ValueError):
    code = "dimension_error"


class NumericError(CGDDError, ArithmeticError):
    code = "numeric_error"


class ConfigError(CGDDError, ValueError):
    code = "config_error"


class UndefinedMetricError(CGDDError, ZeroDivisionError):
    code = "undefined_metric"


class ContractError(CGDDError, RuntimeError):
    """An operation was called while its precondition does not hold."""

    code = "contract_error"


class RoleError(CGDDError, PermissionError):
    """A dataset was routed somewhere its role flag forbids."""

    code = "role_error"


class FormatError(CGDDError, ValueError):
    """A dataset file failed its magic-number or length check."""

    code = "format_error"

    def __init__(self, message, path=None, offset=None):
        super().__init__(message)
        self.path = path
        self.offset = offset


class DivergenceError(CGDDError, FloatingPointError):
    """A training loss became non-finite. ``trace`` holds the offending loss values."""

    code = "divergence"

    def __init__(self, message, trace=None, state=None):
        super().__init__(message)
        self.trace = dict(trace or {})
        self.state = state
