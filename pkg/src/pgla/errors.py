"""Exception hierarchy shared by every stage of the testbed."""


class PglaError(Exception):
    """Base class; ``code`` is the CLI exit status used when it escapes."""

    code = 1


class ParameterError(PglaError, ValueError):
    code = 2


class ShapeError(PglaError, ValueError):
    pass


class LayoutError(ShapeError):
    pass


class SpecError(PglaError, ValueError):
    code = 2


class StructureError(PglaError, ValueError):
    pass


class InputError(PglaError, ValueError):
    pass


class UsageError(PglaError, TypeError):
    pass


class UndefinedMetricError(PglaError, ArithmeticError):
    pass


class FormatError(PglaError, ValueError):
    """Malformed binary input; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MissingArtifactError(PglaError, FileNotFoundError):
    code = 3


class DigestMismatchError(PglaError):
    code = 4
