"""Exception types shared across the package."""


class GlamError(Exception):
    """Base class for all library errors."""


class DimensionError(GlamError, ValueError):
    pass


class ConfigError(GlamError, ValueError):
    pass


class ContractError(GlamError, RuntimeError):
    pass


class NumericError(GlamError, ArithmeticError):
    pass


class GenerationError(GlamError, ValueError):
    pass
