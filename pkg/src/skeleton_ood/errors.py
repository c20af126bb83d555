"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to.
"""


class SkeletonOODError(Exception):
    exit_code = 1


class UsageError(SkeletonOODError, ValueError):
    """Invalid configuration or flag combination."""

    exit_code = 2


class ConfigError(UsageError):
    pass


class ParseError(SkeletonOODError, ValueError):
    """Malformed or truncated input file."""

    exit_code = 3


class ConsistencyError(ParseError):
    pass


class StateError(SkeletonOODError, RuntimeError):
    """Operation attempted on an object in the wrong state (e.g. uncalibrated)."""

    exit_code = 4


class ContractError(SkeletonOODError, ValueError):
    """A precondition of a numeric routine was violated."""

    exit_code = 4


class DomainError(ContractError):
    pass


class ShapeError(ContractError):
    pass


class MetricError(ContractError):
    pass


class ProtocolError(ContractError):
    """Data violates the ID/OOD protocol (e.g. unseen labels in training)."""
