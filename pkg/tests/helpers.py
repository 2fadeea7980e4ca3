"""Shared builders for on-disk test datasets."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from sparsead import write_tensor


def write_dataset(
    root: Path,
    support_tokens: list[np.ndarray],
    test_items: list[dict],
    t_norm: np.ndarray,
    t_anom: np.ndarray,
    *,
    grid: tuple[int, int],
    image_size: tuple[int, int],
    category: str = "widget",
    layers: tuple[int, int] = (12, 24),
    mutate=None,
) -> Path:
    """Write a minimal valid dataset; returns the manifest path.

    ``test_items`` entries: {"tokens": (N, D) f32, "joint": (N, D_t) f32,
    "label": 0/1, "mask": optional (H, W) uint8}. ``mutate`` may edit the
    manifest dict before it is written (for schema-violation tests).
    """
    root = Path(root)
    for sub in ("support", "test", "masks", "text"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    dim = int(support_tokens[0].shape[1])
    joint_dim = int(np.asarray(t_norm).shape[0])

    support = []
    for i, tokens in enumerate(support_tokens):
        rel = f"support/s{i:03d}.npy"
        write_tensor(np.asarray(tokens, dtype=np.float32), root / rel)
        support.append({"id": f"s{i:03d}", "tensor": rel})

    test = []
    for i, item in enumerate(test_items):
        rel_v = f"test/t{i:03d}_v.npy"
        rel_j = f"test/t{i:03d}_j.npy"
        write_tensor(np.asarray(item["tokens"], dtype=np.float32), root / rel_v)
        write_tensor(np.asarray(item["joint"], dtype=np.float32), root / rel_j)
        entry = {
            "id": f"t{i:03d}",
            "tensor": rel_v,
            "joint_tensor": rel_j,
            "label": int(item["label"]),
        }
        if item.get("mask") is not None:
            rel_m = f"masks/t{i:03d}.npy"
            write_tensor(np.asarray(item["mask"], dtype=np.uint8), root / rel_m)
            entry["mask"] = rel_m
        test.append(entry)

    write_tensor(np.asarray(t_norm, dtype=np.float32), root / "text/normal.npy")
    write_tensor(np.asarray(t_anom, dtype=np.float32), root / "text/anomalous.npy")

    manifest = {
        "category": category,
        "image_size": list(image_size),
        "grid": list(grid),
        "dims": [dim, joint_dim],
        "layers": list(layers),
        "support": support,
        "test": test,
        "text": {
            "normal_embedding": "text/normal.npy",
            "anomalous_embedding": "text/anomalous.npy",
            "templates": {
                "normal": f"a photo of a normal {category}.",
                "anomalous": f"a photo of an anomalous {category}.",
            },
        },
    }
    if mutate is not None:
        mutate(manifest)
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def tiny_dataset(root: Path, *, seed: int = 0, n_support: int = 3, labels=(0, 1)) -> Path:
    """A small but fully valid dataset for plumbing tests: 4x4 grid, D=6."""
    rng = np.random.default_rng(seed)
    grid = (4, 4)
    n = grid[0] * grid[1]
    dim, joint_dim = 6, 5
    support = [rng.standard_normal((n, dim)).astype(np.float32) for _ in range(n_support)]
    items = []
    for label in labels:
        mask = None
        if label == 1:
            mask = np.zeros((8, 8), dtype=np.uint8)
            mask[2:4, 2:4] = 1
        items.append(
            {
                "tokens": rng.standard_normal((n, dim)).astype(np.float32),
                "joint": rng.standard_normal((n, joint_dim)).astype(np.float32),
                "label": label,
                "mask": mask,
            }
        )
    t_norm = rng.standard_normal(joint_dim).astype(np.float32)
    t_anom = rng.standard_normal(joint_dim).astype(np.float32)
    return write_dataset(
        root, support, items, t_norm, t_anom, grid=grid, image_size=(8, 8)
    )
