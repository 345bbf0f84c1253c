"""Exception types shared by the loaders, the pipeline and the CLI."""


class PseudoLabelError(Exception):
    """Base class for all package errors."""


class ParseError(PseudoLabelError):
    """A file could not be parsed.

    Carries the offending path and, where meaningful, the byte offset.
    """

    def __init__(self, path, reason, offset=None):
        self.path = str(path)
        self.reason = reason
        self.offset = offset
        where = f"{self.path}" if offset is None else f"{self.path} @ byte {offset}"
        super().__init__(f"{where}: {reason}")


class InvariantError(PseudoLabelError):
    """One or more data invariants are violated.

    ``violations`` lists every problem found, not only the first one.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DimensionError(InvariantError):
    """Feature / embedding dimensions disagree."""


class StageError(PseudoLabelError):
    """Wraps an exception raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
