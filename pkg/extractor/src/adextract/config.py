"""Extraction configuration.

The backbone geometry (ViT-L/14 at 336 px) fixes the token grid to
336/14 = 24 per side, the visual width to 1024 and the joint width to 768.
Layer indices are 1-based block numbers: ``layer_l`` selects the
intermediate (post-residual) hidden states used for visual matching,
``layer_lp`` the block whose tokens are projected into the joint
image-text space.
"""

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

DEFAULT_MODEL = "openai/clip-vit-large-patch14-336"

DEFAULT_TEMPLATES = {
    "normal": "a photo of a normal {}.",
    "anomalous": "a photo of an anomalous {}.",
}


@dataclass(frozen=True)
class ExtractionConfig:
    category: str
    images_dir: Path
    out_dir: Path
    masks_dir: Path | None = None
    model: str = DEFAULT_MODEL
    layer_l: int = 12
    layer_lp: int = 24
    image_size: int = 336
    templates: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_TEMPLATES))
    # Offline mode: a randomly initialized backbone with the production
    # widths but a configurable (usually reduced) depth.
    random_init: bool = False
    depth: int = 24
    text_depth: int = 12
    seed: int = 0
    batch_size: int = 4

    def __post_init__(self):
        if not self.category or not self.category.strip():
            raise ConfigError("category must be a non-empty string")
        for role in ("normal", "anomalous"):
            template = self.templates.get(role)
            if not template:
                raise ConfigError(f"missing template for '{role}'")
            if "{}" not in template:
                raise ConfigError(
                    f"template for '{role}' has no {{}} placeholder: {template!r}"
                )
        if self.layer_l < 1:
            raise ConfigError(f"layer-l must be >= 1, got {self.layer_l}")
        if self.layer_lp < 1:
            raise ConfigError(f"layer-lp must be >= 1, got {self.layer_lp}")
        if self.image_size < 1:
            raise ConfigError(f"image size must be positive, got {self.image_size}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.random_init:
            if self.depth < 1 or self.text_depth < 1:
                raise ConfigError(
                    f"depths must be >= 1, got {self.depth}/{self.text_depth}"
                )

    def prompt(self, role: str) -> str:
        return self.templates[role].format(self.category)
