"""adextract: CLIP patch-feature extraction for anomaly-detection datasets."""

from .backbone import Backbone, load_backbone, offline_tokenizer
from .config import DEFAULT_MODEL, DEFAULT_TEMPLATES, ExtractionConfig
from .errors import (
    ConfigError,
    DecodeError,
    ExportError,
    ExtractorError,
    ShapeDriftError,
)
from .extraction import (
    export_dataset,
    extract_batch,
    extract_image,
    extract_text,
    load_image,
    validate_export,
)

__all__ = [
    "Backbone",
    "ConfigError",
    "DEFAULT_MODEL",
    "DEFAULT_TEMPLATES",
    "DecodeError",
    "ExportError",
    "ExtractionConfig",
    "ExtractorError",
    "ShapeDriftError",
    "export_dataset",
    "extract_batch",
    "extract_image",
    "extract_text",
    "load_backbone",
    "load_image",
    "offline_tokenizer",
    "validate_export",
]
