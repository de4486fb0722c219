"""Exception types shared across the package."""


class SlfcError(Exception):
    """Base class for all package errors."""


class ShapeError(SlfcError, ValueError):
    """Array shapes are inconsistent with an operation's contract."""


class DomainError(SlfcError, ValueError):
    """An argument lies outside the mathematical domain (e.g. a nonpositive variance)."""


class ContractError(SlfcError, ValueError):
    """A precondition on the call was violated (empty batch, bad scale, ...)."""


class DegenerateInputError(SlfcError, ArithmeticError):
    """Every mixture component has zero likelihood; no posterior exists."""


class ConfigError(SlfcError, ValueError):
    """A configuration is invalid or incompatible with data or a checkpoint."""


class NumericalAbort(SlfcError, FloatingPointError):
    """Training or execution produced non-finite values and was stopped."""
