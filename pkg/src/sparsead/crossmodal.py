"""Cross-modal text probing of joint-space patch tokens.

Each token from the joint vision-language layer is compared against two text
embeddings (a normal and an anomalous prompt for the category). The pair of
similarities goes through a temperature softmax and the anomalous component
becomes that token's semantic anomaly probability; the image-level semantic
score is the maximum over tokens.

By default similarities are cosines (tokens and text embeddings are
unit-normalized first); ``normalize=False`` uses raw dot products instead,
which preserves whatever calibration the embedding space already has. The
softmax is computed with max-subtraction, so either path is overflow-safe
and invariant to a constant shift applied to both similarity components.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, ShapeError
from .tensor_io import FeatureTensor, read_vector

_ZERO_NORM_EPS = 1e-12


@dataclass
class TextProbe:
    """The two prompt embeddings a category is probed with."""

    t_norm: np.ndarray   # (D_t,) float32
    t_anom: np.ndarray   # (D_t,) float32
    category: str
    templates: dict[str, str]
    temperature: float = 1.0
    normalize: bool = True

    def __post_init__(self) -> None:
        t_norm = np.ascontiguousarray(self.t_norm, dtype=np.float32)
        t_anom = np.ascontiguousarray(self.t_anom, dtype=np.float32)
        if t_norm.ndim != 1 or t_anom.ndim != 1:
            raise ShapeError("text embeddings must be rank-1 vectors")
        if t_norm.shape != t_anom.shape:
            raise ShapeError(
                f"text embeddings disagree on length: {t_norm.shape[0]} vs "
                f"{t_anom.shape[0]}"
            )
        if not (np.isfinite(t_norm).all() and np.isfinite(t_anom).all()):
            raise ParameterError("text embeddings contain non-finite values")
        if not (isinstance(self.temperature, (int, float)) and self.temperature > 0):
            raise ParameterError(
                f"temperature must be a positive number, got {self.temperature!r}"
            )
        self.t_norm = t_norm
        self.t_anom = t_anom
        self.temperature = float(self.temperature)

    @property
    def dim(self) -> int:
        return self.t_norm.shape[0]


@dataclass
class TokenProbabilityMap:
    """Per-token anomaly probabilities of one image, in grid layout order."""

    p_anom: np.ndarray  # (N,) float64 in [0, 1]
    grid: tuple[int, int]

    def __post_init__(self) -> None:
        p = np.ascontiguousarray(self.p_anom, dtype=np.float64)
        if p.ndim != 1:
            raise ShapeError(f"probabilities must be rank-1, got rank {p.ndim}")
        grid = (int(self.grid[0]), int(self.grid[1]))
        if grid[0] * grid[1] != p.shape[0]:
            raise ShapeError(
                f"grid {grid} implies {grid[0] * grid[1]} tokens but "
                f"{p.shape[0]} probabilities were supplied"
            )
        self.p_anom = p
        self.grid = grid


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm < _ZERO_NORM_EPS:
        return np.zeros_like(v)
    return v / norm


def token_text_probabilities(
    joint: FeatureTensor, probe: TextProbe
) -> TokenProbabilityMap:
    """Softmax the (normal, anomalous) similarities of every joint token.

    Zero-norm tokens or embeddings (under cosine mode) produce similarity 0
    against everything, hence probability exactly 0.5.
    """
    if joint.dim != probe.dim:
        raise ShapeError(
            f"joint tokens have {joint.dim} channels but the probe has "
            f"{probe.dim}"
        )
    tokens = joint.tokens.astype(np.float64)
    t_norm = probe.t_norm.astype(np.float64)
    t_anom = probe.t_anom.astype(np.float64)
    if probe.normalize:
        t_norm = _unit(t_norm)
        t_anom = _unit(t_anom)
        norms = np.linalg.norm(tokens, axis=1)
        keep = norms >= _ZERO_NORM_EPS
        scale = np.maximum(norms, _ZERO_NORM_EPS)[:, np.newaxis]
        tokens = np.where(keep[:, np.newaxis], tokens / scale, 0.0)

    s_norm = tokens @ t_norm
    s_anom = tokens @ t_anom
    if not (np.isfinite(s_norm).all() and np.isfinite(s_anom).all()):
        raise NumericError("similarities are non-finite")

    a = s_norm / probe.temperature
    b = s_anom / probe.temperature
    m = np.maximum(a, b)
    ea = np.exp(a - m)
    eb = np.exp(b - m)
    p_anom = eb / (ea + eb)
    return TokenProbabilityMap(p_anom=p_anom, grid=joint.grid)


def semantic_score(probabilities: TokenProbabilityMap) -> float:
    """Image-level semantic anomaly score: the maximum token probability."""
    if probabilities.p_anom.size == 0:
        raise ParameterError("probability map is empty")
    return float(probabilities.p_anom.max())


def load_text_probe(
    manifest, *, temperature: float = 1.0, normalize: bool = True
) -> TextProbe:
    """Build the probe from a dataset manifest's text block."""
    d_t = manifest.dims[1]
    t_norm = read_vector(manifest.resolve(manifest.text.normal_embedding), expected_dim=d_t)
    t_anom = read_vector(
        manifest.resolve(manifest.text.anomalous_embedding), expected_dim=d_t
    )
    return TextProbe(
        t_norm=t_norm,
        t_anom=t_anom,
        category=manifest.category,
        templates=dict(manifest.text.templates),
        temperature=temperature,
        normalize=normalize,
    )
