"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: DataError -> 2, NumericalError -> 3.
"""


class DataError(ValueError):
    """Input data is malformed, inconsistent or missing."""


class ManifestError(DataError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class ClipFormatError(DataError):
    """A binary tensor or checkpoint file failed validation."""


class NumericalError(ArithmeticError):
    """Training or evaluation produced non-finite values."""
