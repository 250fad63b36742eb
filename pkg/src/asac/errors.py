"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class ContractError(ValueError):
    """An API was called with arguments that violate its contract."""


class ConfigError(ValueError):
    """A run configuration is malformed or inconsistent."""


class GenerationError(RuntimeError):
    """A dataset generator could not satisfy its geometric constraints."""


class NumericsError(ArithmeticError):
    """Training produced a non-finite value and was aborted."""
