"""Exception hierarchy shared by the pipeline and the CLI exit-code mapping."""


class TriprankError(Exception):
    """Base class for every error raised by the package."""


class InputError(TriprankError):
    """Bad input data; the CLI maps these to exit code 2."""


class SchemaError(TriprankError):
    """Configuration or schema conflict; the CLI maps these to exit code 3."""


class MalformedRow(InputError):
    def __init__(self, line: int, message: str = "wrong column count"):
        super().__init__(f"line {line}: {message}")
        self.line = line


class BadDate(InputError):
    def __init__(self, line: int, value: str):
        super().__init__(f"line {line}: unparseable date {value!r}")
        self.line = line
        self.value = value


class MissingColumn(InputError):
    def __init__(self, column: str):
        super().__init__(f"missing column {column!r}")
        self.column = column


class TooFewTrips(InputError):
    pass


class EmptyInput(InputError):
    pass


class TripTooShort(InputError):
    pass


class LengthMismatch(TriprankError, ValueError):
    pass


class ShapeMismatch(TriprankError, ValueError):
    pass


class SchemaMismatch(SchemaError):
    pass


class ConfigError(SchemaError):
    pass
