"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: :class:`DataError` subclasses exit with 2,
:class:`NumericError` with 3.
"""


class SyntaxIEError(Exception):
    pass


class DataError(SyntaxIEError):
    """Invalid input data (files, trees, schemas, configs)."""


class TreeParseError(DataError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class SchemaError(DataError):
    pass


class SpanRangeError(DataError):
    pass


class CorpusFormatError(DataError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ConfigError(DataError):
    pass


class ShapeError(SyntaxIEError, ValueError):
    pass


class NumericError(SyntaxIEError, ArithmeticError):
    pass
