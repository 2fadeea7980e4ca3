"""Exception taxonomy shared across the engine.

Everything raised on purpose by this package derives from :class:`EngineError`
so callers can catch a single base type. The CLI maps input-validation
failures (bad files, bad manifests, bad parameters) to exit code 1 and
everything else to exit code 2; see :data:`VALIDATION_ERRORS`.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class TensorFormatError(EngineError):
    """Malformed tensor file.

    Carries the byte offset at which parsing failed in ``offset`` and appends
    it to the message, so a corrupt file can be inspected with a hex editor.
    """

    def __init__(self, message: str, *, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ShapeError(EngineError):
    """Array shape or dtype differs from what the caller declared."""


class SchemaError(EngineError):
    """Manifest JSON violates the schema: missing, unknown, or ill-typed field."""


class ManifestValidationError(EngineError):
    """Manifest parses but is inconsistent (dangling file, wrong tensor shape)."""


class ParameterError(EngineError):
    """A parameter value is outside its documented domain."""


class DegenerateInputError(EngineError):
    """Input is empty or too small for the operation to be meaningful."""


class UndefinedMetricError(EngineError):
    """The requested metric is undefined for this input (e.g. one class only)."""


class NumericError(EngineError):
    """A computation produced non-finite intermediate values."""


class ConfigurationError(EngineError):
    """Run configuration is inconsistent with the data it is applied to."""


class StageError(EngineError):
    """A pipeline stage failed with a non-engine exception; names the stage."""


#: Error classes that indicate bad input rather than a runtime failure.
#: The CLI exits 1 for these and 2 for any other exception.
VALIDATION_ERRORS = (
    TensorFormatError,
    ShapeError,
    SchemaError,
    ManifestValidationError,
    ParameterError,
)
