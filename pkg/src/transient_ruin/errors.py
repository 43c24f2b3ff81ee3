"""Exception hierarchy shared by all modules."""


class RuinError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(RuinError, ValueError):
    """Model or query violates a documented precondition."""


class RarityViolation(ValidationError):
    """The rarity condition sup_s m(s) < u fails."""


class NumericalError(RuinError, ArithmeticError):
    """A numerical routine failed to deliver its contract."""


class RootFindingError(NumericalError):
    """Bracketing or bisection failed; carries the bracket for diagnostics."""

    def __init__(self, message, bracket=None, values=None):
        super().__init__(message)
        self.bracket = bracket
        self.values = values


class InversionError(NumericalError):
    """Laplace inversion did not converge; carries tail diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
