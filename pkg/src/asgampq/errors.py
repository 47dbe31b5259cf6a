"""Exception hierarchy shared by every module."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A loss or intermediate value became non-finite."""


class FormatError(ValueError):
    """A serialized input (IDX, checkpoint, policy) is malformed."""


class ConfigError(ValueError):
    """An experiment configuration is invalid."""
