"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A parameter set or ratio list is inconsistent with the model layout."""


class ContractError(ValueError):
    """A function precondition was violated by the caller."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
