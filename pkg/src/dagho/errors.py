"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of a formula."""


class PreconditionError(ValueError):
    """A documented precondition of an operation does not hold."""


class AdmissibilityError(ValueError):
    """A schedule parameter is outside its admissible range."""


class NumericFailure(ArithmeticError):
    """An iterative solver produced non-finite values.

    ``last`` holds the last finite iterate (or None if there was none).
    """

    def __init__(self, message, last=None, steps=0):
        super().__init__(message)
        self.last = last
        self.steps = steps
