"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented call contract."""


class ConfigurationError(ValueError):
    """A configuration value is missing, inconsistent, or infeasible."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss, gradient, or parameter vector."""
