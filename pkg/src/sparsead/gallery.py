"""Reference gallery construction and nearest-neighbor deviation scoring.

Every projected support token becomes one gallery row. A test token's
deviation is half of one minus its best cosine similarity against the whole
gallery, so deviations live in [0, 1]: 0 for an exact match, 0.5 for an
orthogonal (or norm-degenerate) token, 1 for an exact negation.

Search never materializes the full (tokens x rows) similarity matrix.
Gallery rows are unit-normalized once in float64 at build time; the search
walks the rows in fixed-size blocks and keeps a running per-token maximum,
so cost scales with the subspace size K and memory stays bounded.

Numeric guards (both counted or snapped deliberately):

- Rows or tokens with L2 norm below 1e-12 get a zero unit vector, which makes
  every cosine against them 0 and the resulting pair distance exactly 0.5.
  ``DeviationMap.guarded_pairs`` counts how many pairs were affected.
- A float64 dot product of two bit-identical unit vectors can land within one
  ulp of 1 on either side, so deviations within 1e-12 of 0 (or of 1) are
  snapped to exactly 0.0 (or 1.0). A support image scored against its own
  gallery therefore reports a visual score of exactly 0.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .subspace import SensitiveSubspace, project
from .tensor_io import FeatureTensor, read_tensor, write_tensor

#: Rows per search block; sized so a block of unit rows plus its similarity
#: slab stays within a few MiB of cache-friendly memory.
_BLOCK_ROWS = 2048

#: Norms below this are treated as zero (see module docstring).
_ZERO_NORM_EPS = 1e-12

#: Deviations within this of an exact 0 or 1 are snapped (see module docstring).
_SNAP_EPS = 1e-12


@dataclass
class DeviationMap:
    """Per-token deviations of one image, in grid layout order."""

    d: np.ndarray  # (N,) float64 in [0, 1]
    grid: tuple[int, int]
    guarded_pairs: int = 0

    def __post_init__(self) -> None:
        d = np.ascontiguousarray(self.d, dtype=np.float64)
        if d.ndim != 1:
            raise ShapeError(f"deviations must be rank-1, got rank {d.ndim}")
        grid = (int(self.grid[0]), int(self.grid[1]))
        if grid[0] * grid[1] != d.shape[0]:
            raise ShapeError(
                f"grid {grid} implies {grid[0] * grid[1]} tokens but "
                f"{d.shape[0]} deviations were supplied"
            )
        self.d = d
        self.grid = grid
        self.guarded_pairs = int(self.guarded_pairs)


@dataclass
class Gallery:
    """All projected support tokens plus derived search state.

    ``entries`` are the raw projected float32 rows (what gets exported);
    ``row_norms`` and the unit rows are float64 derived state recomputed on
    load. Treat instances as immutable after construction: the search reads
    them concurrently from worker threads.
    """

    entries: np.ndarray                 # (R, K) float32
    row_norms: np.ndarray               # (R,) float64
    subspace: SensitiveSubspace
    source: dict = field(default_factory=dict)
    _unit_rows: np.ndarray = field(init=False, repr=False)
    zero_norm_rows: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        entries = np.ascontiguousarray(self.entries, dtype=np.float32)
        if entries.ndim != 2:
            raise ShapeError(f"entries must be rank-2, got rank {entries.ndim}")
        if entries.shape[0] < 1:
            raise DegenerateInputError("gallery has no rows")
        if entries.shape[1] != self.subspace.k:
            raise ShapeError(
                f"entries have {entries.shape[1]} columns but the subspace "
                f"has k={self.subspace.k}"
            )
        row_norms = np.ascontiguousarray(self.row_norms, dtype=np.float64)
        if row_norms.shape != (entries.shape[0],):
            raise ShapeError(
                f"row_norms shape {row_norms.shape} does not match "
                f"{entries.shape[0]} rows"
            )
        unit = entries.astype(np.float64)
        nonzero = row_norms >= _ZERO_NORM_EPS
        unit[nonzero] /= row_norms[nonzero, np.newaxis]
        unit[~nonzero] = 0.0
        self.entries = entries
        self.row_norms = row_norms
        self._unit_rows = unit
        self.zero_norm_rows = int((~nonzero).sum())

    @property
    def n_rows(self) -> int:
        return self.entries.shape[0]


def build_gallery(
    support: Sequence[FeatureTensor],
    subspace: SensitiveSubspace,
    source: dict | None = None,
) -> Gallery:
    """Stack the projected tokens of all support images into one gallery.

    Rows keep support order: image 0's tokens first, in grid order.
    """
    if len(support) == 0:
        raise DegenerateInputError("support set is empty")
    dim = support[0].dim
    for i, tensor in enumerate(support):
        if tensor.dim != dim:
            raise ShapeError(f"support[{i}] has {tensor.dim} channels, expected {dim}")
    entries = np.vstack([project(t, subspace) for t in support])
    row_norms = np.linalg.norm(entries.astype(np.float64), axis=1)
    return Gallery(
        entries=entries,
        row_norms=row_norms,
        subspace=subspace,
        source=dict(source) if source else {},
    )


def token_deviations(test: FeatureTensor, gallery: Gallery) -> DeviationMap:
    """Deviation of every test token from its nearest gallery row."""
    z = project(test, gallery.subspace).astype(np.float64)
    norms = np.linalg.norm(z, axis=1)
    nonzero = norms >= _ZERO_NORM_EPS
    unit = z
    unit[nonzero] /= norms[nonzero, np.newaxis]
    unit[~nonzero] = 0.0

    rows = gallery._unit_rows
    best = np.full(unit.shape[0], -np.inf)
    for lo in range(0, rows.shape[0], _BLOCK_ROWS):
        block = rows[lo : lo + _BLOCK_ROWS]
        np.maximum(best, (unit @ block.T).max(axis=1), out=best)

    d = 0.5 * (1.0 - best)
    d[d < _SNAP_EPS] = 0.0
    d[d > 1.0 - _SNAP_EPS] = 1.0
    np.clip(d, 0.0, 1.0, out=d)

    n_zero_tokens = int((~nonzero).sum())
    guarded = (
        n_zero_tokens * gallery.n_rows
        + (unit.shape[0] - n_zero_tokens) * gallery.zero_norm_rows
    )
    return DeviationMap(d=d, grid=test.grid, guarded_pairs=guarded)


def visual_score(deviations: DeviationMap) -> float:
    """Image-level visual anomaly score: the maximum token deviation."""
    if deviations.d.size == 0:
        raise DegenerateInputError("deviation map is empty")
    return float(deviations.d.max())


def save_gallery(
    gallery: Gallery,
    entries_path: str | os.PathLike,
    indices_path: str | os.PathLike,
) -> tuple[Path, Path]:
    """Export a gallery as two NPY files: float32 entries + int64 indices."""
    return (
        write_tensor(gallery.entries, entries_path),
        write_tensor(gallery.subspace.indices, indices_path),
    )


def load_gallery(
    entries_path: str | os.PathLike,
    indices_path: str | os.PathLike,
) -> Gallery:
    """Import a gallery exported by :func:`save_gallery`.

    Row norms and unit rows are recomputed; the subspace carries no source
    profile (only the index set survives export).
    """
    entries = read_tensor(entries_path, expected_dtype=np.float32)
    indices = read_tensor(indices_path, expected_dtype=np.int64)
    if entries.ndim != 2:
        raise ShapeError(f"{entries_path}: gallery entries must be rank-2")
    if indices.ndim != 1:
        raise ShapeError(f"{indices_path}: gallery indices must be rank-1")
    if entries.shape[1] != indices.shape[0]:
        raise ShapeError(
            f"gallery entries have {entries.shape[1]} columns but "
            f"{indices.shape[0]} indices were supplied"
        )
    subspace = SensitiveSubspace(indices=indices, k=indices.shape[0])
    row_norms = np.linalg.norm(entries.astype(np.float64), axis=1)
    return Gallery(
        entries=entries,
        row_norms=row_norms,
        subspace=subspace,
        source={"imported_from": str(entries_path)},
    )
