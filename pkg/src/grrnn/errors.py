"""Exception types shared across the package."""


class DimensionError(ValueError):
    """An operand has the wrong shape along a named axis."""

    def __init__(self, op, axis, expected, got):
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: axis '{axis}' expected {expected}, got {got}")


class DegenerateStatisticsError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class InputError(ValueError):
    pass


class DataIntegrityError(ValueError):
    pass


class DegenerateFeatureError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf shows up in a loss or gradient."""
