"""Exception types shared across the package."""


class MTPSLabError(Exception):
    """Base class for errors raised by mtpslab."""


class ShapeError(MTPSLabError, ValueError):
    pass


class InvalidMaskError(MTPSLabError, ValueError):
    pass


class ConfigError(MTPSLabError, ValueError):
    pass


class ContractError(MTPSLabError, RuntimeError):
    pass


class NumericError(MTPSLabError, FloatingPointError):
    """Non-finite values where finite ones are required."""


class VariantError(ConfigError):
    pass
