"""Exception hierarchy shared by every stage of the toolkit."""
from __future__ import annotations


class TraceBleedError(Exception):
    """Base class for all toolkit errors."""


class ParseError(TraceBleedError):
    """Malformed input file. Carries the byte offset or line number when known."""

    def __init__(self, message: str, *, offset: int | None = None, line: int | None = None):
        self.offset = offset
        self.line = line
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class SchemaError(TraceBleedError):
    pass


class EmptyTraceError(TraceBleedError):
    pass


class SplitError(TraceBleedError):
    pass


class ConfigError(TraceBleedError):
    pass


class InputError(TraceBleedError):
    pass


class TrainingError(TraceBleedError):
    pass


class CalibrationError(TraceBleedError):
    pass
