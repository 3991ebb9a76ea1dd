"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or argument shapes."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function (e.g. eps <= 0)."""


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite.

    ``index`` is the offending collocation point when it can be located.
    """

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (collocation point {index})")
        self.index = index


class LoadError(ValueError):
    """Malformed input file."""
