"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class DataError(ValueError):
    """An input file is malformed or violates its schema."""
