"""Exception types shared across the pipeline stages.

Every error raised on purpose by this package derives from PipelineError so
callers (and the CLI) can map failures to exit codes without matching on
message strings.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PipelineError):
    """Invalid configuration or command usage."""


class ParseError(PipelineError):
    """Source file is not syntactically valid for its declared format."""

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message)
        self.position = position


class SchemaError(PipelineError):
    """A record is missing a required field or has a bad value."""

    def __init__(self, index: int, field: str, message: str | None = None):
        super().__init__(message or f"record {index}: bad or missing field {field!r}")
        self.index = index
        self.field = field


class TooSmallError(PipelineError):
    """Fewer than two samples; nearest-neighbor lookup is undefined."""


class TemplateError(PipelineError):
    """A prompt template declares its slots incorrectly."""


class SameSampleError(PipelineError):
    """A sample was offered as its own one-shot example."""


class DimensionMismatchError(PipelineError):
    """Vectors of different dimensionality were combined."""


class EmptySequenceError(PipelineError):
    """An operation needing at least one row received none."""


class BackendUnavailableError(PipelineError):
    """A remote backend could not be reached after the configured retries."""


class MalformedResponseError(PipelineError):
    """A backend reply did not follow the declared wire contract."""


class CacheCorruptError(PipelineError):
    """An embedding cache entry could not be read back."""

    def __init__(self, path: str, message: str | None = None):
        super().__init__(message or f"corrupt cache entry: {path}")
        self.path = path


class IdOutOfRangeError(PipelineError):
    """A sample id does not exist in the collection being indexed."""


class ContextOverflowError(PipelineError):
    """A text to score does not fit the backend context even after truncation."""


class EmptyResponseSpanError(PipelineError):
    """No scored tokens fall inside the response portion of the text."""


class EmptyRecordsError(PipelineError):
    """Ranking requires at least one scored record."""


class RatioOutOfRangeError(PipelineError):
    """Selection ratio must lie in (0, 1]."""


class EmptySelectionError(PipelineError):
    """The requested fraction rounds down to zero samples."""


class IdNotFoundError(PipelineError):
    """A selected id has no sample in the dataset being exported."""


class MissingArtifactError(PipelineError):
    """A pipeline stage needs an artifact that has not been produced yet."""


class StaleArtifactError(PipelineError):
    """An artifact on disk was produced from different inputs."""
