"""Training-free visual anomaly detection over a sparse channel subspace.

The pipeline profiles per-channel variance over a small support set of
normal images, keeps the K most variance-sensitive channels, scores test
tokens by cosine deviation from a gallery of projected support tokens, probes
a joint vision-language layer with a normal/anomalous prompt pair, and fuses
the two image-level scores convexly. Pixel maps are bilinear upsamplings of
the token deviations.
"""

from .crossmodal import (
    TextProbe,
    TokenProbabilityMap,
    load_text_probe,
    semantic_score,
    token_text_probabilities,
)
from .errors import (
    ConfigurationError,
    DegenerateInputError,
    EngineError,
    ManifestValidationError,
    NumericError,
    ParameterError,
    SchemaError,
    ShapeError,
    StageError,
    TensorFormatError,
    UndefinedMetricError,
)
from .gallery import (
    DeviationMap,
    Gallery,
    build_gallery,
    load_gallery,
    save_gallery,
    token_deviations,
    visual_score,
)
from .metrics import (
    CategoryMetrics,
    EvaluationReport,
    LabeledScores,
    auroc,
    average_precision,
    evaluate,
    f1_max,
    pro,
    write_report,
)
from .scoring import (
    AnomalyResult,
    PipelineConfig,
    fuse,
    score_image,
    upsample_bilinear,
)
from .subspace import (
    SensitiveSubspace,
    VarianceProfile,
    channel_variance,
    pca_reference,
    project,
    random_subspace,
    select_topk,
)
from .synthetic import SyntheticDataset, generate_benchmark, synthesize
from .tensor_io import (
    DatasetManifest,
    FeatureTensor,
    SupportEntry,
    TestEntry,
    TextSpec,
    load_manifest,
    read_feature_tensor,
    read_header,
    read_tensor,
    read_vector,
    write_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "AnomalyResult",
    "CategoryMetrics",
    "ConfigurationError",
    "DatasetManifest",
    "DegenerateInputError",
    "DeviationMap",
    "EngineError",
    "EvaluationReport",
    "FeatureTensor",
    "Gallery",
    "LabeledScores",
    "ManifestValidationError",
    "NumericError",
    "ParameterError",
    "PipelineConfig",
    "SchemaError",
    "SensitiveSubspace",
    "ShapeError",
    "StageError",
    "SupportEntry",
    "SyntheticDataset",
    "TensorFormatError",
    "TestEntry",
    "TextProbe",
    "TextSpec",
    "TokenProbabilityMap",
    "UndefinedMetricError",
    "VarianceProfile",
    "auroc",
    "average_precision",
    "build_gallery",
    "channel_variance",
    "evaluate",
    "f1_max",
    "fuse",
    "generate_benchmark",
    "load_gallery",
    "load_manifest",
    "load_text_probe",
    "pca_reference",
    "pro",
    "project",
    "random_subspace",
    "read_feature_tensor",
    "read_header",
    "read_tensor",
    "read_vector",
    "save_gallery",
    "score_image",
    "select_topk",
    "semantic_score",
    "synthesize",
    "token_deviations",
    "token_text_probabilities",
    "upsample_bilinear",
    "visual_score",
    "write_report",
    "write_tensor",
]
