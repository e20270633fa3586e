"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions do not agree."""


class DataFormatError(ValueError):
    """A schema, annotation, manifest, feature or checkpoint file is malformed."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class SchemaMismatchError(DataFormatError):
    """A checkpoint was written for a different attribute schema."""


class NumericalError(ArithmeticError):
    """A loss or gradient became non-finite."""
