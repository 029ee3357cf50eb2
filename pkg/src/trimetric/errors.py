"""Exception hierarchy shared across the package."""


class TrimetricError(Exception):
    pass


class InvalidShapeError(TrimetricError, ValueError):
    pass


class NumericError(TrimetricError, ArithmeticError):
    """Raised when a non-finite value or a degenerate input shows up."""


class DegenerateInputError(NumericError):
    pass


class ContractViolation(TrimetricError, RuntimeError):
    pass


class ConfigError(TrimetricError, ValueError):
    pass
