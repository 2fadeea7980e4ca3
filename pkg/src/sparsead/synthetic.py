"""Seeded synthetic benchmark with planted defects.

The generator builds a dataset in the exact on-disk layout the engine
consumes, with a known ground truth, so end-to-end behavior (selection
quality, fusion, localization, metrics) can be exercised without any real
imagery:

- 100 of the 1024 feature channels (by default) carry structure: every
  normal token is one of a few per-channel-standardized prototypes plus
  small within-prototype noise, so these channels have variance ~1 and are
  exactly the ones a variance profile should select.
- The remaining channels are independent noise with variance well below 1.
- Anomalous test images get one rectangular block of tokens whose defect is
  sparse in channel space: a small random subset of the signal channels is
  pushed to a large amplitude while the rest stay at their prototype values.
  The ground-truth mask is the block's pixel footprint. Sparsity is the
  point: a subspace that contains all the structured channels sees the whole
  perturbation, while a random subspace of the same size usually samples
  only a sliver of it.
- A small joint space aligns normal tokens with the normal text embedding
  and defect tokens with the anomalous one, so the text probe is informative
  but imperfect (noisy), mirroring how a semantic channel behaves.

Everything derives from one ``numpy.random.default_rng(seed)`` stream in a
fixed order, so regenerating with the same seed is byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .tensor_io import FeatureTensor, write_tensor

_LAYERS = (12, 24)


@dataclass
class SyntheticDataset:
    """In-memory form of a generated benchmark."""

    category: str
    grid: tuple[int, int]
    image_size: tuple[int, int]
    dims: tuple[int, int]
    layers: tuple[int, int]
    signal_channels: np.ndarray          # (n_signal,) int64, sorted
    support: list[FeatureTensor]
    test_visual: list[FeatureTensor]
    test_joint: list[FeatureTensor]
    labels: list[int]
    pixel_masks: list[np.ndarray | None]  # uint8 (H, W), None for normals
    t_norm: np.ndarray                    # (joint_dim,) float32, unit
    t_anom: np.ndarray                    # (joint_dim,) float32, unit


def _standardize_columns(matrix: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-population-variance per column."""
    centered = matrix - matrix.mean(axis=0)
    std = centered.std(axis=0)
    std[std == 0] = 1.0
    return centered / std


def synthesize(
    seed: int = 0,
    *,
    category: str = "synthetic",
    n_support: int = 64,
    n_test_normal: int = 20,
    n_test_anomalous: int = 20,
    dim: int = 1024,
    joint_dim: int = 64,
    grid: tuple[int, int] = (12, 12),
    n_signal: int = 100,
    n_prototypes: int = 8,
    patch_pixels: int = 8,
    noise_sigma: float = 0.3,
    within_sigma: float = 0.05,
    joint_sigma: float = 0.3,
    joint_scale: float = 3.0,
    defect_channels: int = 8,
    defect_amplitude: float = 3.0,
) -> SyntheticDataset:
    """Build the benchmark in memory. See the module docstring."""
    grid = (int(grid[0]), int(grid[1]))
    if n_signal < 1 or n_signal > dim:
        raise ParameterError(f"n_signal must be in [1, {dim}], got {n_signal}")
    if defect_channels < 1 or defect_channels > n_signal:
        raise ParameterError(
            f"defect_channels must be in [1, {n_signal}], got {defect_channels}"
        )
    if n_prototypes < 2:
        raise ParameterError(f"need at least 2 prototypes, got {n_prototypes}")
    if grid[0] < 3 or grid[1] < 3:
        raise ParameterError(f"grid must be at least 3x3 to plant defects, got {grid}")
    if n_support < 1 or n_test_normal < 0 or n_test_anomalous < 0:
        raise ParameterError("image counts must be non-negative (support >= 1)")
    if joint_dim < 2 or patch_pixels < 1:
        raise ParameterError("joint_dim must be >= 2 and patch_pixels >= 1")

    rng = np.random.default_rng(seed)
    n_tokens = grid[0] * grid[1]
    image_size = (grid[0] * patch_pixels, grid[1] * patch_pixels)

    signal_channels = np.sort(rng.choice(dim, size=n_signal, replace=False)).astype(np.int64)
    prototypes = _standardize_columns(rng.standard_normal((n_prototypes, n_signal)))

    t_norm_dir = rng.standard_normal(joint_dim)
    t_norm_dir /= np.linalg.norm(t_norm_dir)
    t_anom_dir = rng.standard_normal(joint_dim)
    t_anom_dir /= np.linalg.norm(t_anom_dir)

    def normal_tokens() -> tuple[np.ndarray, np.ndarray]:
        """(visual, joint) token matrices for one defect-free image."""
        proto_idx = rng.integers(0, n_prototypes, size=n_tokens)
        visual = rng.normal(0.0, noise_sigma, size=(n_tokens, dim))
        visual[:, signal_channels] = prototypes[proto_idx] + rng.normal(
            0.0, within_sigma, size=(n_tokens, n_signal)
        )
        joint = joint_scale * t_norm_dir + rng.normal(
            0.0, joint_sigma, size=(n_tokens, joint_dim)
        )
        return visual, joint

    def plant_defect(
        visual: np.ndarray, joint: np.ndarray
    ) -> np.ndarray:
        """Overwrite one token block in place; returns the block's token mask."""
        block_h = int(rng.integers(2, 4))
        block_w = int(rng.integers(2, 4))
        row = int(rng.integers(0, grid[0] - block_h + 1))
        col = int(rng.integers(0, grid[1] - block_w + 1))
        token_mask = np.zeros(grid, dtype=bool)
        token_mask[row : row + block_h, col : col + block_w] = True
        flat = token_mask.ravel()
        n_defect = int(flat.sum())

        subset = rng.choice(n_signal, size=defect_channels, replace=False)
        signs = rng.integers(0, 2, size=(n_defect, defect_channels)) * 2 - 1
        cells = np.ix_(np.nonzero(flat)[0], signal_channels[subset])
        visual[cells] = defect_amplitude * signs + rng.normal(
            0.0, within_sigma, size=(n_defect, defect_channels)
        )
        joint[flat] = joint_scale * t_anom_dir + rng.normal(
            0.0, joint_sigma, size=(n_defect, joint_dim)
        )
        return token_mask

    support = []
    for _ in range(n_support):
        visual, _ = normal_tokens()
        support.append(
            FeatureTensor(tokens=visual.astype(np.float32), grid=grid, layer_id=_LAYERS[0])
        )

    # Mixed label order, fixed by the seed.
    labels = [0] * n_test_normal + [1] * n_test_anomalous
    labels = [labels[i] for i in rng.permutation(len(labels))]

    test_visual: list[FeatureTensor] = []
    test_joint: list[FeatureTensor] = []
    pixel_masks: list[np.ndarray | None] = []
    for label in labels:
        visual, joint = normal_tokens()
        if label == 1:
            token_mask = plant_defect(visual, joint)
            pixel_masks.append(
                np.kron(token_mask, np.ones((patch_pixels, patch_pixels))).astype(np.uint8)
            )
        else:
            pixel_masks.append(None)
        test_visual.append(
            FeatureTensor(tokens=visual.astype(np.float32), grid=grid, layer_id=_LAYERS[0])
        )
        test_joint.append(
            FeatureTensor(tokens=joint.astype(np.float32), grid=grid, layer_id=_LAYERS[1])
        )

    return SyntheticDataset(
        category=category,
        grid=grid,
        image_size=image_size,
        dims=(dim, joint_dim),
        layers=_LAYERS,
        signal_channels=signal_channels,
        support=support,
        test_visual=test_visual,
        test_joint=test_joint,
        labels=labels,
        pixel_masks=pixel_masks,
        t_norm=t_norm_dir.astype(np.float32),
        t_anom=t_anom_dir.astype(np.float32),
    )


def generate_benchmark(
    out_dir: str | os.PathLike, seed: int = 0, **kwargs
) -> Path:
    """Materialize :func:`synthesize` output as a dataset directory.

    Writes support/test/mask tensors, the two text embeddings, and
    ``manifest.json``; returns the manifest path. Same seed, same bytes.
    """
    data = synthesize(seed, **kwargs)
    out = Path(out_dir)
    for sub in ("support", "test", "masks", "text"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    support_entries = []
    for i, tensor in enumerate(data.support):
        rel = f"support/support_{i:03d}.npy"
        write_tensor(tensor.tokens, out / rel)
        support_entries.append({"id": f"support_{i:03d}", "tensor": rel})

    test_entries = []
    for i, (visual, joint, label, mask) in enumerate(
        zip(data.test_visual, data.test_joint, data.labels, data.pixel_masks)
    ):
        rel_v = f"test/test_{i:03d}_visual.npy"
        rel_j = f"test/test_{i:03d}_joint.npy"
        write_tensor(visual.tokens, out / rel_v)
        write_tensor(joint.tokens, out / rel_j)
        entry = {
            "id": f"test_{i:03d}",
            "tensor": rel_v,
            "joint_tensor": rel_j,
            "label": label,
        }
        if mask is not None:
            rel_m = f"masks/test_{i:03d}.npy"
            write_tensor(mask, out / rel_m)
            entry["mask"] = rel_m
        test_entries.append(entry)

    write_tensor(data.t_norm, out / "text/normal.npy")
    write_tensor(data.t_anom, out / "text/anomalous.npy")

    manifest = {
        "category": data.category,
        "image_size": list(data.image_size),
        "grid": list(data.grid),
        "dims": list(data.dims),
        "layers": list(data.layers),
        "support": support_entries,
        "test": test_entries,
        "text": {
            "normal_embedding": "text/normal.npy",
            "anomalous_embedding": "text/anomalous.npy",
            "templates": {
                "normal": f"a photo of a normal {data.category}.",
                "anomalous": f"a photo of an anomalous {data.category}.",
            },
        },
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest_path
