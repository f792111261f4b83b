"""Exception types shared across the library.

The command line maps these onto exit codes: NumericalError means a
numerical failure (exit 2), every other library error is a validation
or contract problem (exit 1).
"""


class AttnRegError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(AttnRegError):
    """Operands have shapes the operation does not accept."""


class ContractError(AttnRegError):
    """A call violates the operation's documented contract."""


class StateError(ContractError):
    """An object is not in the state the call requires."""


class NumericalError(AttnRegError):
    """A computation produced non-finite values or diverged."""


class ResourceError(AttnRegError):
    """A request exceeds a configured resource cap."""
