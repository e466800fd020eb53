"""Exception hierarchy shared across the package."""

from __future__ import annotations


class FeatFlowError(Exception):
    """Base class for every error raised by featflow."""


class InvalidInputError(FeatFlowError, ValueError):
    pass


class UndefinedMetricError(FeatFlowError, ValueError):
    """A metric is mathematically undefined for the given ensemble(s)."""


class FormatError(FeatFlowError, ValueError):
    """Malformed binary or text file.

    ``offset`` is the byte offset (binary formats) where decoding failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ParseError(FormatError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        FeatFlowError.__init__(self, message)
        self.offset = None
        self.line = line


class ConfigError(FeatFlowError, ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


class PipelineError(FeatFlowError, RuntimeError):
    pass


class FitError(FeatFlowError, ValueError):
    pass


class TableError(FeatFlowError, ValueError):
    pass
