"""Per-image scoring pipeline: deviations, text probe, fusion, pixel map.

The fused image score is a convex combination of the visual and semantic
scores, ``s = (1 - alpha) * s_vis + alpha * s_text``. Pixel-level maps are
strictly visual: the token deviation grid is upsampled bilinearly to image
resolution and never mixes in text evidence, so localization boundaries stay
sharp regardless of alpha.

Upsampling uses half-pixel center alignment: output pixel (r, c) samples the
grid at ``((r + 0.5) * grid_h / H - 0.5, (c + 0.5) * grid_w / W - 0.5)`` with
source coordinates clamped to the grid, which makes a constant grid map to a
constant image and keeps corners stable. The result is clipped to the
deviation range, so pixel values never overshoot the token evidence.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .crossmodal import TextProbe, semantic_score, token_text_probabilities
from .errors import EngineError, ParameterError, StageError
from .gallery import DeviationMap, Gallery, token_deviations, visual_score
from .tensor_io import DatasetManifest, TestEntry, read_feature_tensor


@dataclass
class PipelineConfig:
    """Knobs of one scoring run.

    ``k`` is the subspace size, ``alpha`` the fusion weight in [0, 1],
    ``temperature`` and ``normalize`` are forwarded to the text probe.
    The layer pair is data, read from the manifest, not configuration.
    """

    k: int = 100
    alpha: float = 0.3
    temperature: float = 1.0
    normalize: bool = True

    def __post_init__(self) -> None:
        if not isinstance(self.k, (int, np.integer)) or isinstance(self.k, bool):
            raise ParameterError(f"k must be an integer, got {self.k!r}")
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")
        if not (isinstance(self.alpha, (int, float)) and 0.0 <= self.alpha <= 1.0):
            raise ParameterError(f"alpha must be in [0, 1], got {self.alpha!r}")
        if not (isinstance(self.temperature, (int, float)) and self.temperature > 0):
            raise ParameterError(
                f"temperature must be positive, got {self.temperature!r}"
            )
        self.k = int(self.k)
        self.alpha = float(self.alpha)
        self.temperature = float(self.temperature)


@dataclass
class AnomalyResult:
    """Everything scored for one test image."""

    image_id: str
    s_vis: float
    s_text: float
    s: float
    pixel_map: np.ndarray            # (H, W) float64
    deviation: DeviationMap | None = None
    label: int | None = None
    timing: dict[str, float] = field(default_factory=dict)


def fuse(s_vis: float, s_text: float, alpha: float) -> float:
    """Convex fusion of the two image scores.

    ``alpha=0`` returns ``s_vis`` unchanged (bit-for-bit) and ``alpha=1``
    returns ``s_text`` unchanged; the branches make the identities exact
    rather than subject to rounding.
    """
    if not (isinstance(alpha, (int, float)) and 0.0 <= alpha <= 1.0):
        raise ParameterError(f"alpha must be in [0, 1], got {alpha!r}")
    for name, value in (("s_vis", s_vis), ("s_text", s_text)):
        if not (isinstance(value, (int, float)) and 0.0 <= value <= 1.0):
            raise ParameterError(f"{name} must be in [0, 1], got {value!r}")
    if alpha == 0.0:
        return float(s_vis)
    if alpha == 1.0:
        return float(s_text)
    return float((1.0 - alpha) * s_vis + alpha * s_text)


def upsample_bilinear(deviations: DeviationMap, out_size: tuple[int, int]) -> np.ndarray:
    """Bilinearly upsample a token deviation grid to (H, W) float64.

    Output values are clipped to [min(d), max(d)], making the no-overshoot
    property exact rather than within rounding.
    """
    h_out, w_out = int(out_size[0]), int(out_size[1])
    if h_out < 1 or w_out < 1:
        raise ParameterError(f"output size must be positive, got {out_size}")
    grid_h, grid_w = deviations.grid
    grid = deviations.d.reshape(grid_h, grid_w)

    src_r = np.clip((np.arange(h_out) + 0.5) * grid_h / h_out - 0.5, 0.0, grid_h - 1.0)
    src_c = np.clip((np.arange(w_out) + 0.5) * grid_w / w_out - 0.5, 0.0, grid_w - 1.0)
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    r1 = np.minimum(r0 + 1, grid_h - 1)
    c1 = np.minimum(c0 + 1, grid_w - 1)
    wr = (src_r - r0)[:, np.newaxis]
    wc = (src_c - c0)[np.newaxis, :]

    top = grid[np.ix_(r0, c0)] * (1.0 - wc) + grid[np.ix_(r0, c1)] * wc
    bottom = grid[np.ix_(r1, c0)] * (1.0 - wc) + grid[np.ix_(r1, c1)] * wc
    out = top * (1.0 - wr) + bottom * wr
    np.clip(out, grid.min(), grid.max(), out=out)
    return out


@contextmanager
def _stage(name: str, image_id: str):
    """Re-raise stage failures with the stage and image attached.

    Engine errors keep their class (the CLI's exit-code classification relies
    on it); anything else is wrapped in StageError.
    """
    try:
        yield
    except EngineError as exc:
        raise type(exc)(
            f"stage '{name}' failed for image '{image_id}': {exc}"
        ) from exc
    except Exception as exc:  # pragma: no cover - defensive
        raise StageError(
            f"stage '{name}' failed for image '{image_id}': {exc}"
        ) from exc


def score_image(
    entry: TestEntry,
    manifest: DatasetManifest,
    gallery: Gallery,
    probe: TextProbe,
    config: PipelineConfig,
) -> AnomalyResult:
    """Score one test entry end to end.

    Loads the entry's two feature tensors, computes token deviations against
    the gallery, probes the joint tokens against the text embeddings, fuses
    the image scores, and upsamples the deviation grid to a pixel map.
    """
    timing: dict[str, float] = {}

    t0 = time.perf_counter()
    with _stage("load", entry.id):
        visual = read_feature_tensor(
            manifest.resolve(entry.tensor),
            manifest.grid,
            layer_id=manifest.layers[0],
            expected_dim=manifest.dims[0],
        )
        joint = read_feature_tensor(
            manifest.resolve(entry.joint_tensor),
            manifest.grid,
            layer_id=manifest.layers[1],
            expected_dim=manifest.dims[1],
        )
    timing["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("deviations", entry.id):
        deviations = token_deviations(visual, gallery)
        s_vis = visual_score(deviations)
    timing["deviations"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("text", entry.id):
        probabilities = token_text_probabilities(joint, probe)
        s_text = semantic_score(probabilities)
    timing["text"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("fuse", entry.id):
        s = fuse(s_vis, s_text, config.alpha)
    timing["fuse"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with _stage("upsample", entry.id):
        pixel_map = upsample_bilinear(deviations, manifest.image_size)
    timing["upsample"] = time.perf_counter() - t0

    return AnomalyResult(
        image_id=entry.id,
        s_vis=s_vis,
        s_text=s_text,
        s=s,
        pixel_map=pixel_map,
        deviation=deviations,
        label=entry.label,
        timing=timing,
    )
