"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to.
"""


class OtdeconvError(Exception):
    exit_code = 1


class ConfigError(OtdeconvError, ValueError):
    """Invalid parameters or configuration (CLI exit code 2)."""

    exit_code = 2


class ShapeError(ConfigError):
    """Operand extents are incompatible."""


class ContractError(OtdeconvError, RuntimeError):
    """An API precondition was violated by the caller."""

    exit_code = 2


class NumericalError(OtdeconvError, FloatingPointError):
    """A non-finite value appeared in a loss or gradient (CLI exit code 3)."""

    exit_code = 3


class FormatError(OtdeconvError, IOError):
    """Malformed or unreadable file (CLI exit code 4)."""

    exit_code = 4
