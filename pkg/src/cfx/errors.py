"""Exception hierarchy. The CLI maps each family onto an exit code."""


class CfxError(Exception):
    """Base class for all package errors."""


class DataError(CfxError):
    """Malformed input data: missing columns, bad cells, out-of-range codes."""


class ContractError(CfxError):
    """A documented precondition was violated by the caller."""


class NumericalError(CfxError):
    """Non-finite values or divergence during a numerical routine."""
