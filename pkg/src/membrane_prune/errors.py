"""Exception hierarchy shared by every module of the toolkit."""


class PruneError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(PruneError, ValueError):
    """Tensor extents are inconsistent with the requested operation."""


class NumericError(PruneError, ArithmeticError):
    """A NaN or infinite value appeared where finite values are required."""


class InputError(PruneError, ValueError):
    """Arguments are well-formed but semantically invalid."""


class StructuralError(PruneError, ValueError):
    """A network edit would leave a layer without any output maps."""


class FormatError(PruneError, ValueError):
    """A file could not be decoded.

    ``offset`` is the byte position at which decoding failed, or ``None``
    when the failure is not tied to a position.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
