"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: validation problems exit 1,
numeric faults exit 2.
"""


class TvaeError(Exception):
    """Base class for all package-specific errors."""


class DomainError(TvaeError):
    """An operation was evaluated outside its mathematical domain."""


class ContractViolation(TvaeError):
    """A caller broke an API precondition (shape, type, or mode)."""


class ValidationError(TvaeError):
    """User-supplied data, config, or file content is invalid."""


class NumericFault(TvaeError):
    """A computation produced non-finite values and cannot continue."""
