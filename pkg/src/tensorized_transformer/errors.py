"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ArgumentError(ValueError):
    """An argument is outside its admissible range."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class ConfigError(ValueError):
    """A configuration failed validation; ``violations`` lists every problem."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class InputError(ValueError):
    """Bad user data: token ids, corpus contents, sequence lengths."""


class FormatError(ValueError):
    """A checkpoint file is malformed."""
