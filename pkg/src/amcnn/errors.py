"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, bad input data
exits 2, numerical failures exit 3.
"""


class AmcnnError(Exception):
    """Base class for all package errors."""


class ShapeError(AmcnnError, ValueError):
    """Tensor extents are inconsistent with what an operation requires."""


class DataError(AmcnnError):
    """An input file or annotation set could not be used."""


class AnnotationFormatError(DataError):
    def __init__(self, path, lineno, message):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class CheckpointError(DataError):
    """A checkpoint file could not be loaded."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class NumericalError(AmcnnError):
    """Training or a gradient check produced non-finite or out-of-tolerance values."""


class DivergenceError(NumericalError):
    def __init__(self, step, value):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value!r} at step {step}")
