"""Exception types raised across the pipeline."""


class DomainError(ValueError):
    """Input outside an operation's mathematical domain."""

    kind = "domain"


class DimensionMismatchError(DomainError):
    kind = "dimension-mismatch"


class DegenerateInputError(DomainError):
    kind = "degenerate-input"


class NoPathError(DomainError):
    kind = "no-path"


class AlignmentError(DomainError):
    kind = "alignment-failure"

    def __init__(self, message, frame=None):
        super().__init__(message)
        self.frame = frame


class DecodeError(DomainError):
    kind = "decode"

    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


class FormatError(ValueError):
    """Malformed file content. ``offset`` is the byte offset when known."""

    kind = "format"

    def __init__(self, message, offset=None, path=None):
        super().__init__(message)
        self.offset = offset
        self.path = path
