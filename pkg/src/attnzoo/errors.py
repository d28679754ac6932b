"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced or received a non-finite value."""


class ConfigError(ValueError):
    """A model, attention or run configuration is invalid."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""
