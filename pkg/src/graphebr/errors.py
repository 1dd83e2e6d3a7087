"""Exception taxonomy shared across the package."""


class ValidationError(ValueError):
    """An input violates a documented precondition."""


class GraphParseError(ValidationError):
    """A graph or feature file is malformed at a specific line."""

    def __init__(self, path, line_number, message):
        self.path = str(path)
        self.line_number = int(line_number)
        super().__init__(f"{path}:{line_number}: {message}")


class ShapeError(ValidationError):
    """Operand shapes do not conform to an operation's shape rule."""


class DomainError(ValidationError):
    """A value lies outside the mathematical domain of an operation."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class SkipExample(Exception):
    """A sampled training example is unusable; the caller should redraw."""
