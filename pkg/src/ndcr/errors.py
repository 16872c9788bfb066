"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ConfigError`` is 1, ``FormatError`` is 2,
``NonFiniteError`` and ``GradCheckError`` are 3.
"""


class NDCRError(Exception):
    pass


class ConfigError(NDCRError, ValueError):
    pass


class ShapeError(NDCRError, ValueError):
    def __init__(self, op: str, left, right):
        self.op = op
        self.shapes = (tuple(left), tuple(right))
        super().__init__(f"{op}: incompatible shapes {tuple(left)} and {tuple(right)}")


class NonFiniteError(NDCRError, ArithmeticError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced a non-finite value")


class FormatError(NDCRError, ValueError):
    """Malformed dataset or checkpoint file. ``offset`` is the byte position, if known."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DimensionError(NDCRError, ValueError):
    pass


class GradCheckError(NDCRError, AssertionError):
    pass
