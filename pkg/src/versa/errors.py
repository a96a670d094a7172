"""Exception hierarchy shared across the library."""


class VersaError(Exception):
    """Base class for all library errors."""


class DimensionError(VersaError):
    """Tensor/vector shapes do not conform to an operation's shape rule."""


class DomainError(VersaError):
    """A numeric input left an operation's documented domain (e.g. log of a
    non-positive value), or a non-finite value appeared where finiteness is
    guaranteed."""


class ContractError(VersaError):
    """A documented precondition was violated by the caller."""


class OptimizationError(VersaError):
    """Training or a per-task fit diverged (NaN loss); carries the iteration
    at which it happened in the message."""


class ConfigError(VersaError):
    """A run configuration is invalid (unknown enum member, bad counts...)."""
