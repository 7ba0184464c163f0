"""Complementary-item recommendation from interaction logs."""

__version__ = "0.1.0"


class DataError(ValueError):
    """Input files or records that violate a format or invariant."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
