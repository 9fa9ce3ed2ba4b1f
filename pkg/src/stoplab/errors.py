"""Exception types shared across the package."""


class StoplabError(Exception):
    """Base class for all package errors."""


class ConfigError(StoplabError):
    """Invalid configuration value (tree size, schedule, config file)."""


class CapacityError(ConfigError):
    """Requested exhaustive computation exceeds the supported size."""


class DomainError(StoplabError):
    """Operation applied outside its domain.

    Raised for things like conditional expectations at a leaf, thresholds
    outside (0, 1), recombining trees passed to filtration-sensitive
    operations, or a constraint that fails its feasibility screen.
    """


class ParseError(StoplabError):
    """Expression could not be parsed. Carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class SignatureError(ParseError):
    """Expression refers to a variable outside its declared signature."""


class EvalError(StoplabError):
    """Expression evaluation produced a non-finite value."""


class StabilityError(StoplabError):
    """A stability guard rejected the requested solve."""


class SolverError(StoplabError):
    """The backward solver failed at a node."""

    def __init__(self, message: str, node: int = -1):
        if node >= 0:
            message = f"{message} (node {node})"
        super().__init__(message)
        self.node = node


class InfeasibleError(SolverError):
    """No feasible control value inside the search bracket."""
