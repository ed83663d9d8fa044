"""Exception types shared across the package."""


class FormatError(ValueError):
    """Malformed input file or table."""


class ShapeError(ValueError):
    """Signal length or channel layout does not match the operator."""


class CapabilityError(RuntimeError):
    """The operator does not support the requested evaluation mode."""


class NumericalError(ArithmeticError):
    """NaN, zero row sum or another numerical breakdown."""


class SizeError(ValueError):
    """Input too large for a dense (brute-force) routine."""
