"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class GrbalError(Exception):
    exit_code = 1


class DimensionError(GrbalError, ValueError):
    exit_code = 4

    def __init__(self, what, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class ConfigError(GrbalError, ValueError):
    exit_code = 3


class DataError(GrbalError, ValueError):
    exit_code = 4


class ArtifactError(GrbalError):
    exit_code = 5


class NumericError(GrbalError, ArithmeticError):
    exit_code = 6


class ControlError(NumericError):
    pass


class ArgumentError(GrbalError, ValueError):
    """Precondition violated by a caller (empty batch, bad length, ...)."""

    exit_code = 4
