"""Channel variance profiling and sensitive-subspace selection.

The support set is treated as one pool of patch tokens. For each feature
channel we compute the population variance of its activations across the
pool; the K channels with the largest variance form the sensitive subspace
used for all downstream visual scoring. An eigendecomposition-based reference
(`pca_reference`) is kept alongside as an independent check: when the pooled
covariance is close to diagonal, the top-K principal axes coincide with the
top-K variance channels, and the reference reports exactly which ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError
from .tensor_io import FeatureTensor


@dataclass
class VarianceProfile:
    """Per-channel population variance over the pooled support tokens."""

    sigma2: np.ndarray  # (D,) float64, all >= 0
    sample_count: int   # pooled token count the profile was computed from

    def __post_init__(self) -> None:
        sigma2 = np.ascontiguousarray(self.sigma2, dtype=np.float64)
        if sigma2.ndim != 1:
            raise ShapeError(f"sigma2 must be rank-1, got rank {sigma2.ndim}")
        if not np.isfinite(sigma2).all():
            raise ParameterError("sigma2 contains non-finite values")
        if (sigma2 < 0).any():
            raise ParameterError("sigma2 contains negative values")
        self.sigma2 = sigma2
        self.sample_count = int(self.sample_count)

    @property
    def dim(self) -> int:
        return self.sigma2.shape[0]


@dataclass
class SensitiveSubspace:
    """A set of K channel indices, stored sorted ascending.

    ``source_profile`` is the profile the indices were selected from, or None
    for externally supplied index sets (imports, random baselines).
    """

    indices: np.ndarray  # (K,) int64, sorted ascending, distinct
    k: int
    source_profile: VarianceProfile | None = None

    def __post_init__(self) -> None:
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        if indices.ndim != 1:
            raise ShapeError(f"indices must be rank-1, got rank {indices.ndim}")
        if indices.shape[0] != self.k:
            raise ParameterError(
                f"k={self.k} but {indices.shape[0]} indices were supplied"
            )
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")
        if (indices < 0).any():
            raise ParameterError("channel indices must be non-negative")
        if (np.diff(indices) <= 0).any():
            raise ParameterError("channel indices must be distinct and ascending")
        if self.source_profile is not None and indices[-1] >= self.source_profile.dim:
            raise ParameterError(
                f"index {int(indices[-1])} is out of range for a "
                f"{self.source_profile.dim}-channel profile"
            )
        self.indices = indices
        self.k = int(self.k)


def channel_variance(support: Sequence[FeatureTensor]) -> VarianceProfile:
    """Population variance per channel over all tokens of all support images.

    Two-pass in float64: exact mean first, then squared deviations. The
    result is invariant (to float64 rounding) under token and image
    reordering and scales quadratically under uniform feature scaling.
    """
    if len(support) == 0:
        raise DegenerateInputError("support set is empty")
    dim = support[0].dim
    for i, tensor in enumerate(support):
        if tensor.dim != dim:
            raise ShapeError(
                f"support[{i}] has {tensor.dim} channels, expected {dim}"
            )
    total = sum(t.n_tokens for t in support)
    if total < 2:
        raise DegenerateInputError(
            f"variance needs at least 2 pooled tokens, got {total}"
        )

    mean = np.zeros(dim, dtype=np.float64)
    for tensor in support:
        mean += tensor.tokens.sum(axis=0, dtype=np.float64)
    mean /= total

    ssd = np.zeros(dim, dtype=np.float64)
    for tensor in support:
        delta = tensor.tokens.astype(np.float64) - mean
        ssd += np.einsum("nd,nd->d", delta, delta)
    sigma2 = ssd / total
    # Exact arithmetic cannot go negative; guard the last-ulp case anyway.
    np.maximum(sigma2, 0.0, out=sigma2)
    return VarianceProfile(sigma2=sigma2, sample_count=total)


def select_topk(profile: VarianceProfile, k: int) -> SensitiveSubspace:
    """Select the k channels with the largest variance.

    Ties are broken by ascending channel index, so the selection is a pure
    function of the profile. The returned indices are sorted ascending and
    satisfy min(sigma2[selected]) >= max(sigma2[unselected]).
    """
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool):
        raise ParameterError(f"k must be an integer, got {k!r}")
    if k < 1 or k > profile.dim:
        raise ParameterError(
            f"k must be in [1, {profile.dim}] for a {profile.dim}-channel "
            f"profile, got {k}"
        )
    # Primary key: variance descending; secondary: channel index ascending.
    order = np.lexsort((np.arange(profile.dim), -profile.sigma2))
    indices = np.sort(order[:k]).astype(np.int64)
    return SensitiveSubspace(indices=indices, k=int(k), source_profile=profile)


#: Salt that domain-separates the baseline's random stream from every other
#: seeded component, so passing one seed to both a data generator and this
#: baseline can never silently reuse the same draws.
_SELECTION_STREAM = 0x5E1EC7


def random_subspace(dim: int, k: int, seed: int) -> SensitiveSubspace:
    """A seeded random K-channel subspace (ablation baseline)."""
    if k < 1 or k > dim:
        raise ParameterError(f"k must be in [1, {dim}], got {k}")
    rng = np.random.default_rng([seed, _SELECTION_STREAM])
    indices = np.sort(rng.choice(dim, size=k, replace=False)).astype(np.int64)
    return SensitiveSubspace(indices=indices, k=int(k), source_profile=None)


def project(tensor: FeatureTensor, subspace: SensitiveSubspace) -> np.ndarray:
    """Restrict tokens to the subspace channels: a (N, K) float32 view copy.

    Column i of the result is the channel ``subspace.indices[i]`` of the
    input, i.e. columns follow the stored (ascending) index order.
    """
    if int(subspace.indices[-1]) >= tensor.dim:
        raise ShapeError(
            f"subspace index {int(subspace.indices[-1])} is out of range for a "
            f"{tensor.dim}-channel tensor"
        )
    return np.ascontiguousarray(tensor.tokens[:, subspace.indices])


def pca_reference(support: Sequence[FeatureTensor], k: int) -> np.ndarray | None:
    """Channel indices implied by truncated PCA, when they are well-defined.

    Pools all support tokens, eigendecomposes the population covariance, and
    takes the top-k eigenvectors. If every one of them is axis-dominant
    (its largest absolute coordinate >= 0.9, i.e. it is essentially a channel
    axis) and the dominant axes are distinct, returns those k channel indices
    sorted ascending. Otherwise returns None: the covariance is not close
    enough to diagonal for a channel-level comparison to be meaningful.
    """
    if len(support) == 0:
        raise DegenerateInputError("support set is empty")
    pooled = np.concatenate([t.tokens.astype(np.float64) for t in support], axis=0)
    n, dim = pooled.shape
    if n < 2:
        raise DegenerateInputError("reference needs at least 2 pooled tokens")
    if k < 1 or k > dim:
        raise ParameterError(f"k must be in [1, {dim}], got {k}")
    centered = pooled - pooled.mean(axis=0)
    cov = (centered.T @ centered) / n
    try:
        _, vecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError:
        return None
    # eigh returns eigenvalues ascending; take the top-k columns.
    top = vecs[:, ::-1][:, :k]
    dominant = np.abs(top).argmax(axis=0)
    strength = np.abs(top[dominant, np.arange(k)])
    if (strength < 0.9).any():
        return None
    if len(set(dominant.tolist())) != k:
        return None
    return np.sort(dominant.astype(np.int64))
