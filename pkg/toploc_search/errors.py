"""Exception hierarchy for toploc-search.

Note: This code was generated with assistance from AI coding tools
and has been reviewed and tested by a human.
"""

from pathlib import Path


class ToplocError(Exception):
    """Base exception for toploc-search errors."""

    pass


class InvalidInputError(ToplocError, ValueError):
    """Raised when an operation's preconditions are violated."""

    pass


class InvalidStateError(ToplocError):
    """Raised when a session is used before it has been opened."""

    pass


class EmptyReportError(ToplocError):
    """Raised when an evaluation has no topic to evaluate."""

    pass


class InternalError(ToplocError):
    """Raised when an internal invariant is broken."""

    pass


class ParseError(ToplocError):
    """Raised when an input file is malformed.

    Binary readers report the byte offset, text readers the 1-based line.
    """

    def __init__(
        self,
        path: Path,
        message: str,
        *,
        offset: int | None = None,
        line: int | None = None,
    ) -> None:
        self.path = path
        self.offset = offset
        self.line = line
        where = ""
        if offset is not None:
            where = f" at byte {offset}"
        elif line is not None:
            where = f" at line {line}"
        super().__init__(f"{path}{where}: {message}")
