"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are not conformable."""


class DomainError(ValueError):
    """An elementwise op was evaluated outside its domain."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ContractError(RuntimeError):
    """A precondition on call order or arguments was violated."""


class ConfigError(ValueError):
    pass


class RangeError(IndexError):
    pass


class IntegrationError(FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InversionError(ArithmeticError):
    pass


class StatisticsError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
