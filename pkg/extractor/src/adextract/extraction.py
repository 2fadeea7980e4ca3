"""Feature extraction and dataset export.

Input layout (``--images``)::

    images/
      support/            normal images for the support set
      test/
        good/             normal test images (label 0)
        <anything-else>/  defective test images (label 1)

Masks (``--masks``, optional) mirror the test groups:
``masks/<group>/<stem>_mask.png`` or ``masks/<group>/<stem>.png``.

Output is the engine's dataset layout: one float32 NPY per tensor, uint8
NPY masks at the original image resolution, and ``manifest.json`` tying
them together. Files are written atomically (write-then-rename) so a
killed run never leaves a manifest pointing at half-written tensors.
"""

import json
import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .backbone import MAX_TEXT_TOKENS, Backbone, load_backbone
from .config import ExtractionConfig
from .errors import ConfigError, DecodeError, ExportError, ShapeDriftError

logger = logging.getLogger("adextract")

# Standard CLIP preprocessing statistics.
IMAGE_MEAN = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
IMAGE_STD = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}

_ID_SAFE = re.compile(r"[^A-Za-z0-9._-]")


def load_image(path: Path, image_size: int) -> torch.Tensor:
    """Decode, resize uniformly to ``image_size``, normalize, CHW float32."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB").resize(
                (image_size, image_size), Image.Resampling.BICUBIC
            )
            pixels = np.asarray(img, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from None
    pixels = (pixels - IMAGE_MEAN) / IMAGE_STD
    return torch.from_numpy(pixels.transpose(2, 0, 1).copy())


def extract_batch(
    backbone: Backbone, pixels: torch.Tensor, layer_l: int, layer_lp: int
) -> tuple[np.ndarray, np.ndarray]:
    """Run one image batch; return (visual, joint) patch features.

    Visual features are the post-residual hidden states of block
    ``layer_l`` with the class token dropped. Joint features are block
    ``layer_lp``'s tokens through the final layernorm and the visual
    projection — the image-side coordinates of the shared text space.
    """
    vision = backbone.model.vision_model
    with torch.inference_mode():
        out = vision(pixel_values=pixels, output_hidden_states=True)
        visual = out.hidden_states[layer_l][:, 1:, :]
        projected = backbone.model.visual_projection(
            vision.post_layernorm(out.hidden_states[layer_lp])
        )[:, 1:, :]
    visual_np = np.ascontiguousarray(visual.numpy(), dtype=np.float32)
    joint_np = np.ascontiguousarray(projected.numpy(), dtype=np.float32)

    n_tokens = backbone.grid[0] * backbone.grid[1]
    expect_visual = (pixels.shape[0], n_tokens, backbone.visual_width)
    expect_joint = (pixels.shape[0], n_tokens, backbone.joint_width)
    if visual_np.shape != expect_visual or joint_np.shape != expect_joint:
        raise ShapeDriftError(
            f"extracted shapes {visual_np.shape}/{joint_np.shape} do not match "
            f"model geometry {expect_visual}/{expect_joint}"
        )
    return visual_np, joint_np


def extract_image(path: Path, backbone: Backbone, config: ExtractionConfig):
    """Single-image convenience wrapper around extract_batch."""
    pixels = load_image(path, config.image_size).unsqueeze(0)
    visual, joint = extract_batch(backbone, pixels, config.layer_l, config.layer_lp)
    return visual[0], joint[0]


def extract_text(backbone: Backbone, config: ExtractionConfig) -> dict[str, np.ndarray]:
    """Encode the two prompts into joint-space vectors. No ensembling."""
    vectors = {}
    for role in ("normal", "anomalous"):
        prompt = config.prompt(role)
        ids = backbone.tokenizer(prompt)["input_ids"]
        if len(ids) > MAX_TEXT_TOKENS:
            raise ConfigError(
                f"prompt for '{role}' tokenizes to {len(ids)} tokens, "
                f"over the {MAX_TEXT_TOKENS}-token limit: {prompt!r}"
            )
        enc = backbone.tokenizer(
            prompt, padding="max_length", max_length=MAX_TEXT_TOKENS,
            return_tensors="pt",
        )
        with torch.inference_mode():
            out = backbone.model.get_text_features(
                input_ids=enc["input_ids"], attention_mask=enc["attention_mask"]
            )
        vector = np.ascontiguousarray(out.pooler_output[0].numpy(), dtype=np.float32)
        if vector.shape != (backbone.joint_width,):
            raise ShapeDriftError(
                f"text vector shape {vector.shape} != ({backbone.joint_width},)"
            )
        vectors[role] = vector
    return vectors


def atomic_save(array: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as handle:
        np.save(handle, array)
    os.replace(tmp, path)


def _atomic_write_text(text: str, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _safe_id(raw: str, seen: set[str], context: str) -> str:
    safe = _ID_SAFE.sub("-", raw)
    if safe in seen:
        raise ExportError(f"duplicate id '{safe}' after sanitizing {context}")
    seen.add(safe)
    return safe


def _image_files(folder: Path) -> list[Path]:
    return sorted(
        p for p in folder.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


@dataclass
class _TestItem:
    id: str
    path: Path
    label: int
    mask_path: Path | None


def _scan_layout(config: ExtractionConfig) -> tuple[list[tuple[str, Path]], list[_TestItem]]:
    support_dir = config.images_dir / "support"
    test_dir = config.images_dir / "test"
    if not support_dir.is_dir():
        raise ExportError(f"missing support folder: {support_dir}")
    if not test_dir.is_dir():
        raise ExportError(f"missing test folder: {test_dir}")

    seen: set[str] = set()
    support = [
        (_safe_id(p.stem, seen, str(p)), p) for p in _image_files(support_dir)
    ]
    if not support:
        raise ExportError(f"support folder has no images: {support_dir}")

    tests: list[_TestItem] = []
    seen_test: set[str] = set()
    for group_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        group = group_dir.name
        label = 0 if group == "good" else 1
        for path in _image_files(group_dir):
            item_id = _safe_id(f"{group}_{path.stem}", seen_test, str(path))
            mask_path = None
            if label == 1 and config.masks_dir is not None:
                for candidate in (
                    config.masks_dir / group / f"{path.stem}_mask.png",
                    config.masks_dir / group / path.name,
                ):
                    if candidate.is_file():
                        mask_path = candidate
                        break
                if mask_path is None:
                    logger.warning("no mask found for test image %s", path)
            tests.append(_TestItem(id=item_id, path=path, label=label, mask_path=mask_path))
    if not tests:
        raise ExportError(f"test folder has no images: {test_dir}")
    return support, tests


def _original_size(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as img:
            width, height = img.size
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from None
    return (height, width)


def _load_mask(path: Path, image_size: tuple[int, int]) -> np.ndarray:
    with Image.open(path) as img:
        mask = (np.asarray(img.convert("L")) > 0).astype(np.uint8)
    if mask.shape != image_size:
        raise ExportError(
            f"mask {path} has shape {mask.shape}, expected {image_size} "
            "(masks must match the test images' native resolution)"
        )
    return mask


def _extract_folder(
    backbone: Backbone,
    config: ExtractionConfig,
    entries: list[tuple[str, Path]],
    out_dir: Path,
    with_joint: bool,
) -> list[str]:
    """Batched extraction of (id, image path) entries into ``out_dir``.

    Support tensors are ``<id>.npy`` (visual only); test tensors are
    ``<id>_visual.npy`` plus ``<id>_joint.npy``. Undecodable images are
    skipped with a warning; returns the ids that made it to disk.
    """
    done: list[str] = []
    batch: list[tuple[str, torch.Tensor]] = []

    def flush() -> None:
        if not batch:
            return
        pixels = torch.stack([p for _, p in batch])
        visual, joint = extract_batch(backbone, pixels, config.layer_l, config.layer_lp)
        for i, (item_id, _) in enumerate(batch):
            if with_joint:
                atomic_save(visual[i], out_dir / f"{item_id}_visual.npy")
                atomic_save(joint[i], out_dir / f"{item_id}_joint.npy")
            else:
                atomic_save(visual[i], out_dir / f"{item_id}.npy")
            done.append(item_id)
        batch.clear()

    for item_id, path in entries:
        try:
            batch.append((item_id, load_image(path, config.image_size)))
        except DecodeError as exc:
            logger.warning("skipping undecodable image: %s", exc)
            continue
        if len(batch) == config.batch_size:
            flush()
    flush()
    return done


def _check_geometry(tests: list[_TestItem]) -> tuple[int, int]:
    """Native resolution shared by the test set (and its masks).

    Pixel maps and masks live at the test images' native resolution, so
    it has to agree across the set. Checked before the model loads:
    a layout mistake should not cost minutes of extraction first.
    """
    image_size = None
    first = None
    for item in tests:
        try:
            size = _original_size(item.path)
        except DecodeError:
            continue  # the extraction loop will log and skip it
        if image_size is None:
            image_size, first = size, item.path
        elif size != image_size:
            raise ExportError(
                f"test images disagree on native size: {first} is "
                f"{image_size}, {item.path} is {size}"
            )
        if item.mask_path is not None:
            with Image.open(item.mask_path) as img:
                mask_size = (img.size[1], img.size[0])
            if mask_size != size:
                raise ExportError(
                    f"mask {item.mask_path} has shape {mask_size}, expected {size} "
                    "(masks must match the test images' native resolution)"
                )
    if image_size is None:
        raise ExportError("no test image could be decoded")
    return image_size


def export_dataset(config: ExtractionConfig) -> Path:
    """Extract every tensor, write masks and manifest, self-validate."""
    support, tests = _scan_layout(config)
    image_size = _check_geometry(tests)
    backbone = load_backbone(config)
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)

    support_done = _extract_folder(
        backbone, config, support, out / "support", with_joint=False
    )
    if not support_done:
        raise ExportError("no support image could be decoded")

    test_done = set(
        _extract_folder(
            backbone, config, [(t.id, t.path) for t in tests], out / "test",
            with_joint=True,
        )
    )
    kept = [t for t in tests if t.id in test_done]
    if not kept:
        raise ExportError("no test image could be decoded")

    test_entries = []
    for item in kept:
        entry = {
            "id": item.id,
            "tensor": f"test/{item.id}_visual.npy",
            "joint_tensor": f"test/{item.id}_joint.npy",
            "label": item.label,
        }
        if item.mask_path is not None:
            mask = _load_mask(item.mask_path, image_size)
            atomic_save(mask, out / "masks" / f"{item.id}.npy")
            entry["mask"] = f"masks/{item.id}.npy"
        test_entries.append(entry)

    text_vectors = extract_text(backbone, config)
    atomic_save(text_vectors["normal"], out / "text" / "normal.npy")
    atomic_save(text_vectors["anomalous"], out / "text" / "anomalous.npy")

    manifest = {
        "category": config.category,
        "image_size": list(image_size),
        "grid": list(backbone.grid),
        "dims": [backbone.visual_width, backbone.joint_width],
        "layers": [config.layer_l, config.layer_lp],
        "support": [
            {"id": sid, "tensor": f"support/{sid}.npy"} for sid in support_done
        ],
        "test": test_entries,
        "text": {
            "normal_embedding": "text/normal.npy",
            "anomalous_embedding": "text/anomalous.npy",
            "templates": {
                "normal": config.prompt("normal"),
                "anomalous": config.prompt("anomalous"),
            },
        },
    }
    manifest_path = out / "manifest.json"
    _atomic_write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", manifest_path)

    validate_export(out)
    logger.info(
        "exported %d support + %d test images to %s",
        len(support_done), len(kept), out,
    )
    return manifest_path


def validate_export(out_dir: Path) -> None:
    """Structural self-check of an export against the dataset schema.

    Re-reads the manifest and verifies that every referenced file exists
    with the declared shape and dtype. This keeps the extractor honest
    without depending on the engine package; the engine's own validator
    is the final authority and is exercised in the integration tests.
    """
    manifest_path = out_dir / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ExportError(f"cannot read exported manifest: {exc}") from None

    required = {"category", "image_size", "grid", "dims", "layers", "support", "test", "text"}
    missing = required - manifest.keys()
    if missing:
        raise ExportError(f"exported manifest is missing fields: {sorted(missing)}")

    grid = tuple(manifest["grid"])
    dims = tuple(manifest["dims"])
    image_size = tuple(manifest["image_size"])
    n_tokens = grid[0] * grid[1]

    def check(relpath: str, shape: tuple, dtype: type) -> None:
        path = out_dir / relpath
        if not path.is_file():
            raise ExportError(f"manifest references missing file: {relpath}")
        header = np.load(path, mmap_mode="r")
        if header.shape != shape or header.dtype != dtype:
            raise ExportError(
                f"{relpath}: shape {header.shape} dtype {header.dtype}, "
                f"expected {shape} {np.dtype(dtype)}"
            )

    if not manifest["support"]:
        raise ExportError("exported manifest has an empty support set")
    for entry in manifest["support"]:
        check(entry["tensor"], (n_tokens, dims[0]), np.float32)
    for entry in manifest["test"]:
        if entry["label"] not in (0, 1):
            raise ExportError(f"test entry {entry['id']}: label must be 0 or 1")
        check(entry["tensor"], (n_tokens, dims[0]), np.float32)
        check(entry["joint_tensor"], (n_tokens, dims[1]), np.float32)
        if "mask" in entry:
            check(entry["mask"], image_size, np.uint8)
    check(manifest["text"]["normal_embedding"], (dims[1],), np.float32)
    check(manifest["text"]["anomalous_embedding"], (dims[1],), np.float32)
