"""Exception types raised by cgplvm."""


class NumericalError(RuntimeError):
    """A computation broke down numerically (failed factorization, underflow, NaN)."""


class DegenerateLengthscaleError(NumericalError):
    """The double integral of the base kernel underflowed."""


class DegenerateTruncationError(NumericalError):
    """A truncated distribution has (numerically) no mass on its interval."""


class DegenerateDecompositionError(NumericalError):
    """All decomposition components are identically zero."""


class CsvParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
