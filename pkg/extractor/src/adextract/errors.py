"""Exception types for the extractor."""


class ExtractorError(Exception):
    """Base class for all extractor failures."""


class ConfigError(ExtractorError):
    """Invalid configuration: bad layer index, missing model, bad template."""


class DecodeError(ExtractorError):
    """An image file could not be decoded."""


class ShapeDriftError(ExtractorError):
    """Extracted features do not match the shapes implied by the model config."""


class ExportError(ExtractorError):
    """Dataset export failed: bad folder layout, id collision, or invalid output."""
