"""Exception types shared across the package."""


class NumericalError(ArithmeticError):
    """Raised when a computation leaves the numerically valid region.

    ``diagnostics`` carries whatever context the raising site had (condition
    numbers, last valid iterate, ...).
    """

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class UnsupportedDomainError(ValueError):
    """The requested operation is not defined for this domain."""
