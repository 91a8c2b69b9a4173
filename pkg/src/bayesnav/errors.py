"""Exception types shared across the package."""


class BayesNavError(Exception):
    """Base class for all package errors."""


class InputShapeError(BayesNavError, ValueError):
    pass


class NumericDomainError(BayesNavError, ValueError):
    pass


class ContractError(BayesNavError, RuntimeError):
    """A precondition between cooperating calls was violated."""


class UnsupportedStrategyError(BayesNavError, ValueError):
    """Decision strategy cannot be applied to the given predictions/variant."""
