"""Exception taxonomy shared across the package.

Every error raised on a user-facing path derives from :class:`BronchosimError`
so callers (and the CLI) can map failures onto exit codes without matching on
message strings.
"""

from __future__ import annotations


class BronchosimError(Exception):
    """Base class for all package errors."""


class ParameterError(BronchosimError):
    """A configuration or argument value is outside its documented domain.

    The message always names the offending field.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class GenerationError(BronchosimError):
    """Tree synthesis could not satisfy its geometric constraints."""

    def __init__(self, segment_id: int, message: str):
        self.segment_id = segment_id
        super().__init__(f"segment {segment_id}: {message}")


class TessellationError(BronchosimError):
    """Surface stitching failed for a specific segment."""

    def __init__(self, segment_id: int, message: str):
        self.segment_id = segment_id
        super().__init__(f"segment {segment_id}: {message}")


class PlacementError(BronchosimError):
    """A camera pose is not inside the airway lumen."""


class RouteError(BronchosimError):
    """A fly-through route does not exist in the tree."""


class FormatError(BronchosimError):
    """A file does not conform to its expected binary or text layout.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class IngestionError(BronchosimError):
    """An evaluation bundle is incomplete or inconsistent."""


class AlignmentError(BronchosimError):
    """Median alignment is undefined for the given prediction map."""


class InputError(BronchosimError):
    """Evaluation inputs disagree in shape or are otherwise unusable."""
