"""Exception types shared across the package.

Every error raised deliberately by this package derives from
:class:`SwarGuideError`, so callers can catch one base class at API
boundaries. File-format problems additionally derive from
:class:`FormatError` and carry the byte offset where parsing failed.
"""

from __future__ import annotations


class SwarGuideError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SwarGuideError):
    """A parameter or configuration value is out of its legal range."""


class ShapeMismatchError(SwarGuideError):
    """Two tensors that must agree in shape or vocabulary do not."""


class NonFiniteValueError(SwarGuideError):
    """A tensor contains NaN or infinity where finite values are required."""


class AllZeroFieldError(SwarGuideError):
    """A guidance field is zero everywhere, so no magnitude distribution exists."""


class SingleTokenMapError(SwarGuideError):
    """Evenness is undefined for a distribution over a single token."""


class LengthMismatchError(SwarGuideError):
    """Two distributions that must share a support length do not."""


class NoScoredStepsError(SwarGuideError):
    """An aggregate was requested but no step carries a score."""


class DegenerateMaskError(SwarGuideError):
    """A segmentation mask cannot support the requested computation."""


class EmptyForegroundError(DegenerateMaskError):
    """The mask marks no pixel as foreground."""


class EmptyBackgroundError(DegenerateMaskError):
    """The mask marks no pixel as background."""


class UnknownClassError(SwarGuideError):
    """A condition id does not name any class of the scene."""


class ScheduleMismatchError(SwarGuideError):
    """An oracle and a sampler config disagree on the scale schedule."""


class OracleError(SwarGuideError):
    """An oracle failed to produce logits for a step."""


class InvalidDimensionsError(SwarGuideError):
    """Requested grid dimensions are not achievable from the input."""


class FormatError(SwarGuideError):
    """A file does not conform to its binary or text format.

    :param message: human-readable description of the problem.
    :param offset: byte offset into the file where the problem was
        detected, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(FormatError):
    """The file does not start with the expected magic bytes."""


class SizeMismatchError(FormatError):
    """Declared lengths and actual payload length disagree."""


class NonFinitePayloadError(FormatError):
    """A binary payload contains NaN or infinity."""


class UnsupportedFormatError(FormatError):
    """The file is a recognizable format this package does not accept."""


class DimensionMismatchError(FormatError):
    """Parsed dimensions disagree with the expected resolution."""
