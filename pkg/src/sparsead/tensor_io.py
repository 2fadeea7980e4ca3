"""Tensor files and dataset manifests.

Dense arrays move through NPY version 1.0 files written in one canonical
form: 6-byte magic, version ``(1, 0)``, a little-endian uint16 header length,
an ASCII header dict padded with spaces so the payload starts on a 64-byte
boundary, then the row-major little-endian payload. Writing is deterministic:
the same array always produces the same bytes, and decoding then re-encoding
a canonical file reproduces it exactly.

Supported payload dtypes are float32 (``<f4``, features / text embeddings /
score maps), uint8 (``|u1``, binary masks), int64 (``<i8``, channel index
sets) and float64 (``<f8``, variance profiles). Anything else is rejected.

Manifests are strict UTF-8 JSON. Unknown fields are rejected so drift between
the engine and any upstream feature exporter fails loudly, and every
referenced file is existence- and header-checked at load time. Paths inside a
manifest are resolved relative to the manifest's directory. Entry ids double
as output filenames, so they are restricted to ``[A-Za-z0-9._-]``.
"""

from __future__ import annotations

import ast
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    ManifestValidationError,
    ParameterError,
    SchemaError,
    ShapeError,
    TensorFormatError,
)

_MAGIC = b"\x93NUMPY"
_VERSION = b"\x01\x00"
_ALIGN = 64

_DESCR_TO_DTYPE = {
    "<f4": np.dtype("<f4"),
    "|u1": np.dtype("|u1"),
    "<i8": np.dtype("<i8"),
    "<f8": np.dtype("<f8"),
}
_DTYPE_TO_DESCR = {
    np.dtype(np.float32): "<f4",
    np.dtype(np.uint8): "|u1",
    np.dtype(np.int64): "<i8",
    np.dtype(np.float64): "<f8",
}

_ID_PATTERN = re.compile(r"^[A-Za-z0-9._-]+$")


# ---------------------------------------------------------------------------
# NPY container
# ---------------------------------------------------------------------------


def _encode(array: np.ndarray) -> bytes:
    """Serialize *array* to canonical NPY v1.0 bytes."""
    array = np.asarray(array)
    descr = _DTYPE_TO_DESCR.get(array.dtype)
    if descr is None:
        supported = ", ".join(sorted(str(d) for d in _DTYPE_TO_DESCR))
        raise ParameterError(
            f"unsupported array dtype {array.dtype!r}; supported: {supported}"
        )
    if array.ndim not in (1, 2):
        raise ParameterError(
            f"only rank-1 and rank-2 arrays are supported, got rank {array.ndim}"
        )
    if array.dtype.kind == "f" and not np.isfinite(array).all():
        raise ParameterError("array contains non-finite values")

    header = (
        f"{{'descr': '{descr}', 'fortran_order': False, "
        f"'shape': {tuple(array.shape)!r}, }}"
    ).encode("ascii")
    base = len(_MAGIC) + len(_VERSION) + 2 + len(header) + 1
    header += b" " * (-base % _ALIGN) + b"\n"
    payload = np.ascontiguousarray(array, dtype=_DESCR_TO_DTYPE[descr]).tobytes()
    return (
        _MAGIC
        + _VERSION
        + len(header).to_bytes(2, "little")
        + header
        + payload
    )


def _parse_header(data: bytes) -> tuple[tuple[int, ...], str, int]:
    """Parse the NPY prelude of *data*.

    Returns (shape, descr, payload_offset). Raises TensorFormatError with the
    byte offset at which parsing failed.
    """
    if data[: len(_MAGIC)] != _MAGIC:
        raise TensorFormatError("not an NPY file: bad magic string", offset=0)
    if len(data) < 8:
        raise TensorFormatError("truncated file: missing version bytes", offset=6)
    if data[6:8] != _VERSION:
        raise TensorFormatError(
            f"unsupported NPY version {(data[6], data[7])}; only (1, 0) is accepted",
            offset=6,
        )
    if len(data) < 10:
        raise TensorFormatError("truncated file: missing header length", offset=8)
    header_len = int.from_bytes(data[8:10], "little")
    header_end = 10 + header_len
    if len(data) < header_end:
        raise TensorFormatError(
            f"truncated header: expected {header_len} header bytes", offset=len(data)
        )
    raw_header = data[10:header_end]
    try:
        text = raw_header.decode("ascii")
    except UnicodeDecodeError as exc:
        raise TensorFormatError("header is not ASCII", offset=10 + exc.start) from exc
    if not text.endswith("\n"):
        raise TensorFormatError(
            "header is not newline-terminated", offset=header_end - 1
        )
    try:
        meta = ast.literal_eval(text)
    except (ValueError, SyntaxError) as exc:
        raise TensorFormatError("header is not a Python dict literal", offset=10) from exc
    if not isinstance(meta, dict) or set(meta) != {"descr", "fortran_order", "shape"}:
        raise TensorFormatError(
            "header must be a dict with exactly the keys "
            "'descr', 'fortran_order', 'shape'",
            offset=10,
        )
    descr = meta["descr"]
    if descr not in _DESCR_TO_DTYPE:
        supported = ", ".join(sorted(_DESCR_TO_DTYPE))
        raise TensorFormatError(
            f"unsupported dtype descriptor {descr!r}; supported: {supported}",
            offset=10,
        )
    if meta["fortran_order"] is not False:
        raise TensorFormatError(
            "column-major (fortran_order=True) payloads are not supported", offset=10
        )
    shape = meta["shape"]
    if (
        not isinstance(shape, tuple)
        or not all(isinstance(n, int) and not isinstance(n, bool) and n >= 0 for n in shape)
    ):
        raise TensorFormatError(
            "shape must be a tuple of non-negative integers", offset=10
        )
    if len(shape) not in (1, 2):
        raise TensorFormatError(
            f"unsupported rank {len(shape)}; only rank-1 and rank-2 arrays are accepted",
            offset=10,
        )
    return shape, descr, header_end


def _decode(data: bytes) -> np.ndarray:
    shape, descr, payload_offset = _parse_header(data)
    dtype = _DESCR_TO_DTYPE[descr]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = len(data) - payload_offset
    if actual != expected:
        count = actual // dtype.itemsize
        raise ShapeError(
            f"header declares shape {shape} ({expected} payload bytes) but the "
            f"payload holds {actual} bytes ({count} {descr} elements)"
        )
    return np.frombuffer(data, dtype=dtype, offset=payload_offset).reshape(shape).copy()


def write_tensor(array: np.ndarray, path: str | os.PathLike) -> Path:
    """Write *array* to *path* in the canonical NPY v1.0 form.

    Accepts rank-1/rank-2 arrays of dtype float32, float64, uint8 or int64;
    float payloads must be finite. Returns the path written.
    """
    path = Path(path)
    encoded = _encode(array)
    path.write_bytes(encoded)
    return path


def read_tensor(
    path: str | os.PathLike,
    *,
    expected_shape: tuple[int, ...] | None = None,
    expected_dtype: np.dtype | str | None = None,
) -> np.ndarray:
    """Read an NPY v1.0 file and return the decoded array.

    *expected_shape* / *expected_dtype*, when given, are checked against the
    decoded array and a mismatch raises ShapeError naming the file.
    """
    path = Path(path)
    array = _decode(path.read_bytes())
    if expected_shape is not None and array.shape != tuple(expected_shape):
        raise ShapeError(
            f"{path}: expected shape {tuple(expected_shape)}, found {array.shape}"
        )
    if expected_dtype is not None and array.dtype != np.dtype(expected_dtype):
        raise ShapeError(
            f"{path}: expected dtype {np.dtype(expected_dtype)}, found {array.dtype}"
        )
    return array


def read_header(path: str | os.PathLike) -> tuple[tuple[int, ...], str]:
    """Read only the header of an NPY file: (shape, dtype descriptor).

    Also verifies that the file size matches the declared payload, so a
    truncated tensor is caught without reading its payload.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        prelude = fh.read(10)
        if len(prelude) < 10:
            # Delegate to the full parser for a precise offset.
            _parse_header(prelude)
        header_len = int.from_bytes(prelude[8:10], "little")
        data = prelude + fh.read(header_len)
        shape, descr, payload_offset = _parse_header(data)
        size = os.fstat(fh.fileno()).st_size
    dtype = _DESCR_TO_DTYPE[descr]
    expected = payload_offset + int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if size != expected:
        raise ShapeError(
            f"{path}: header declares shape {shape} ({expected} total bytes) but "
            f"the file holds {size} bytes"
        )
    return shape, descr


# ---------------------------------------------------------------------------
# Feature tensors
# ---------------------------------------------------------------------------


@dataclass
class FeatureTensor:
    """Patch-token features of one image: a (N, D) float32 matrix.

    ``grid`` is the (height, width) token layout with ``grid[0] * grid[1]``
    equal to N. ``layer_id`` records which backbone block produced the
    features; it is a label only and never interpreted.
    """

    tokens: np.ndarray
    grid: tuple[int, int]
    layer_id: int = -1

    def __post_init__(self) -> None:
        tokens = np.ascontiguousarray(self.tokens, dtype=np.float32)
        if tokens.ndim != 2:
            raise ShapeError(f"tokens must be rank-2, got rank {tokens.ndim}")
        if tokens.shape[0] < 1 or tokens.shape[1] < 1:
            raise DegenerateInputError(
                f"feature tensor must hold at least one token and one channel, "
                f"got shape {tokens.shape}"
            )
        grid = (int(self.grid[0]), int(self.grid[1]))
        if grid[0] < 1 or grid[1] < 1:
            raise ShapeError(f"grid must be positive, got {grid}")
        if grid[0] * grid[1] != tokens.shape[0]:
            raise ShapeError(
                f"grid {grid} implies {grid[0] * grid[1]} tokens but the tensor "
                f"holds {tokens.shape[0]}"
            )
        if not np.isfinite(tokens).all():
            raise ParameterError("tokens contain non-finite values")
        self.tokens = tokens
        self.grid = grid
        self.layer_id = int(self.layer_id)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


def read_feature_tensor(
    path: str | os.PathLike,
    grid: tuple[int, int],
    *,
    layer_id: int = -1,
    expected_dim: int | None = None,
) -> FeatureTensor:
    """Read a (N, D) float32 NPY file into a FeatureTensor."""
    tokens = read_tensor(path, expected_dtype=np.float32)
    if tokens.ndim != 2:
        raise ShapeError(f"{path}: expected a rank-2 feature tensor, got {tokens.shape}")
    if expected_dim is not None and tokens.shape[1] != expected_dim:
        raise ShapeError(
            f"{path}: expected {expected_dim} channels, found {tokens.shape[1]}"
        )
    return FeatureTensor(tokens=tokens, grid=tuple(grid), layer_id=layer_id)


def read_vector(path: str | os.PathLike, *, expected_dim: int | None = None) -> np.ndarray:
    """Read a rank-1 float32 NPY file (e.g. a text embedding)."""
    vec = read_tensor(path, expected_dtype=np.float32)
    if vec.ndim != 1:
        raise ShapeError(f"{path}: expected a rank-1 vector, got shape {vec.shape}")
    if expected_dim is not None and vec.shape[0] != expected_dim:
        raise ShapeError(
            f"{path}: expected a length-{expected_dim} vector, found {vec.shape[0]}"
        )
    return vec


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SupportEntry:
    id: str
    tensor: str


@dataclass(frozen=True)
class TestEntry:
    id: str
    tensor: str
    joint_tensor: str
    label: int
    mask: str | None = None


@dataclass(frozen=True)
class TextSpec:
    normal_embedding: str
    anomalous_embedding: str
    templates: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetManifest:
    """Parsed, validated dataset description.

    All tensor paths are stored as written in the manifest and resolved
    against ``base_dir`` (the manifest's directory).
    """

    category: str
    image_size: tuple[int, int]
    grid: tuple[int, int]
    dims: tuple[int, int]
    layers: tuple[int, int]
    support: tuple[SupportEntry, ...]
    test: tuple[TestEntry, ...]
    text: TextSpec
    base_dir: Path

    def resolve(self, relpath: str) -> Path:
        return self.base_dir / relpath

    @property
    def tokens_per_image(self) -> int:
        return self.grid[0] * self.grid[1]


def _expect_keys(obj: dict, required: set[str], optional: set[str], ctx: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaError(f"{ctx} must be a JSON object, got {type(obj).__name__}")
    missing = required - set(obj)
    if missing:
        raise SchemaError(f"{ctx} is missing required field '{sorted(missing)[0]}'")
    unknown = set(obj) - required - optional
    if unknown:
        raise SchemaError(f"{ctx} has unknown field '{sorted(unknown)[0]}'")


def _int_pair(value: Any, ctx: str, *, minimum: int = 1) -> tuple[int, int]:
    ok = (
        isinstance(value, list)
        and len(value) == 2
        and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        and all(v >= minimum for v in value)
    )
    if not ok:
        raise SchemaError(f"{ctx} must be a list of two integers >= {minimum}")
    return int(value[0]), int(value[1])


def _string(value: Any, ctx: str) -> str:
    if not isinstance(value, str) or not value:
        raise SchemaError(f"{ctx} must be a non-empty string")
    return value


def _entry_id(value: Any, ctx: str) -> str:
    text = _string(value, ctx)
    if not _ID_PATTERN.match(text):
        raise SchemaError(
            f"{ctx} must match [A-Za-z0-9._-]+ (ids become output filenames), "
            f"got {text!r}"
        )
    return text


def _check_file(
    manifest_dir: Path,
    relpath: str,
    ctx: str,
    expected_shape: tuple[int, ...],
    expected_descr: str,
) -> None:
    path = manifest_dir / relpath
    if not path.is_file():
        raise ManifestValidationError(f"{ctx}: file not found: {path}")
    try:
        shape, descr = read_header(path)
    except (TensorFormatError, ShapeError) as exc:
        raise ManifestValidationError(f"{ctx}: {exc}") from exc
    if shape != expected_shape:
        raise ManifestValidationError(
            f"{ctx}: expected shape {expected_shape}, found {shape} in {path}"
        )
    if descr != expected_descr:
        raise ManifestValidationError(
            f"{ctx}: expected dtype {expected_descr}, found {descr} in {path}"
        )


def load_manifest(path: str | os.PathLike, *, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a dataset manifest.

    Schema violations raise SchemaError naming the offending field; dangling
    or mis-shaped tensor files raise ManifestValidationError naming the entry.
    Set ``check_files=False`` to skip the per-file header checks (used by
    tooling that validates structure before tensors exist).
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestValidationError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest {path} is not valid JSON: {exc}") from exc

    _expect_keys(
        raw,
        required={"category", "image_size", "grid", "dims", "layers", "support", "test", "text"},
        optional=set(),
        ctx="manifest",
    )
    category = _string(raw["category"], "manifest field 'category'")
    image_size = _int_pair(raw["image_size"], "manifest field 'image_size'")
    grid = _int_pair(raw["grid"], "manifest field 'grid'")
    dims = _int_pair(raw["dims"], "manifest field 'dims'")
    layers = _int_pair(raw["layers"], "manifest field 'layers'", minimum=0)
    n_tokens = grid[0] * grid[1]

    if not isinstance(raw["support"], list) or not raw["support"]:
        raise SchemaError("manifest field 'support' must be a non-empty list")
    support: list[SupportEntry] = []
    for i, item in enumerate(raw["support"]):
        ctx = f"support[{i}]"
        _expect_keys(item, required={"id", "tensor"}, optional=set(), ctx=ctx)
        support.append(
            SupportEntry(
                id=_entry_id(item["id"], f"{ctx} field 'id'"),
                tensor=_string(item["tensor"], f"{ctx} field 'tensor'"),
            )
        )

    if not isinstance(raw["test"], list):
        raise SchemaError("manifest field 'test' must be a list")
    test: list[TestEntry] = []
    for i, item in enumerate(raw["test"]):
        ctx = f"test[{i}]"
        _expect_keys(
            item,
            required={"id", "tensor", "joint_tensor", "label"},
            optional={"mask"},
            ctx=ctx,
        )
        label = item["label"]
        if not isinstance(label, int) or isinstance(label, bool) or label not in (0, 1):
            raise SchemaError(f"{ctx} field 'label' must be the integer 0 or 1")
        mask = item.get("mask")
        if mask is not None:
            mask = _string(mask, f"{ctx} field 'mask'")
        test.append(
            TestEntry(
                id=_entry_id(item["id"], f"{ctx} field 'id'"),
                tensor=_string(item["tensor"], f"{ctx} field 'tensor'"),
                joint_tensor=_string(item["joint_tensor"], f"{ctx} field 'joint_tensor'"),
                label=label,
                mask=mask,
            )
        )

    text_raw = raw["text"]
    _expect_keys(
        text_raw,
        required={"normal_embedding", "anomalous_embedding", "templates"},
        optional=set(),
        ctx="manifest field 'text'",
    )
    _expect_keys(
        text_raw["templates"],
        required={"normal", "anomalous"},
        optional=set(),
        ctx="manifest field 'text.templates'",
    )
    text = TextSpec(
        normal_embedding=_string(text_raw["normal_embedding"], "text.normal_embedding"),
        anomalous_embedding=_string(
            text_raw["anomalous_embedding"], "text.anomalous_embedding"
        ),
        templates={
            "normal": _string(text_raw["templates"]["normal"], "text.templates.normal"),
            "anomalous": _string(
                text_raw["templates"]["anomalous"], "text.templates.anomalous"
            ),
        },
    )

    for name, entries in (("support", support), ("test", test)):
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ManifestValidationError(f"duplicate {name} id {dup!r}")

    manifest = DatasetManifest(
        category=category,
        image_size=image_size,
        grid=grid,
        dims=dims,
        layers=layers,
        support=tuple(support),
        test=tuple(test),
        text=text,
        base_dir=path.parent,
    )

    if check_files:
        base = manifest.base_dir
        for i, entry in enumerate(support):
            _check_file(
                base, entry.tensor, f"support[{i}] ({entry.id})",
                (n_tokens, dims[0]), "<f4",
            )
        for i, entry in enumerate(test):
            ctx = f"test[{i}] ({entry.id})"
            _check_file(base, entry.tensor, ctx, (n_tokens, dims[0]), "<f4")
            _check_file(
                base, entry.joint_tensor, f"{ctx} joint", (n_tokens, dims[1]), "<f4"
            )
            if entry.mask is not None:
                _check_file(base, entry.mask, f"{ctx} mask", image_size, "|u1")
        _check_file(base, text.normal_embedding, "text.normal_embedding", (dims[1],), "<f4")
        _check_file(
            base, text.anomalous_embedding, "text.anomalous_embedding", (dims[1],), "<f4"
        )

    return manifest
