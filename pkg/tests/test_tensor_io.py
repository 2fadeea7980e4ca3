"""Tensor container and manifest loading.

The container has an independent oracle: numpy's own NPY writer/reader.
Our bytes must equal ``np.save`` bytes for every supported dtype, each
implementation must read the other's output, and decode-then-reencode must
reproduce canonical files exactly.
"""

import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsead import (
    FeatureTensor,
    ManifestValidationError,
    ParameterError,
    SchemaError,
    ShapeError,
    TensorFormatError,
    load_manifest,
    read_feature_tensor,
    read_header,
    read_tensor,
    read_vector,
    write_tensor,
)
from helpers import tiny_dataset, write_dataset


def numpy_save_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, array)
    return buf.getvalue()


class TestRoundTrip:
    def test_single_zero_float32(self, tmp_path):
        path = tmp_path / "a.npy"
        write_tensor(np.zeros((1, 1), dtype=np.float32), path)
        out = read_tensor(path)
        assert out.dtype == np.float32
        np.testing.assert_array_equal(out, [[0.0]])

    def test_payload_is_little_endian_float32(self, tmp_path):
        path = write_tensor(np.array([[1.0]], dtype=np.float32), tmp_path / "one.npy")
        # 1.0f is 00 00 80 3f little-endian; payload is the last 4 bytes.
        assert path.read_bytes()[-4:] == b"\x00\x00\x80\x3f"

    def test_seeded_array_bit_identical(self, tmp_path):
        rng = np.random.default_rng(42)
        array = rng.standard_normal((4, 8)).astype(np.float32)
        path = write_tensor(array, tmp_path / "a.npy")
        out = read_tensor(path)
        assert out.dtype == array.dtype
        assert out.tobytes() == array.tobytes()

    @pytest.mark.parametrize(
        "array",
        [
            np.arange(12, dtype=np.float32).reshape(3, 4),
            np.arange(7, dtype=np.int64),
            np.array([[0, 1], [1, 0]], dtype=np.uint8),
            np.linspace(0, 1, 9, dtype=np.float64).reshape(3, 3),
        ],
        ids=["f4", "i8", "u1", "f8"],
    )
    def test_all_supported_dtypes(self, tmp_path, array):
        path = write_tensor(array, tmp_path / "a.npy")
        out = read_tensor(path)
        assert out.dtype == array.dtype
        assert out.shape == array.shape
        assert out.tobytes() == array.tobytes()

    def test_decode_reencode_reproduces_bytes(self, tmp_path):
        rng = np.random.default_rng(7)
        path = write_tensor(rng.random((5, 3), dtype=np.float32), tmp_path / "a.npy")
        original = path.read_bytes()
        rewritten = write_tensor(read_tensor(path), tmp_path / "b.npy")
        assert rewritten.read_bytes() == original

    def test_write_is_deterministic(self, tmp_path):
        array = np.full((2, 2), 0.5, dtype=np.float32)
        a = write_tensor(array, tmp_path / "a.npy")
        b = write_tensor(array, tmp_path / "b.npy")
        assert a.read_bytes() == b.read_bytes()

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(
            dtype=np.float32,
            shape=st.tuples(st.integers(1, 6), st.integers(1, 6)),
            elements=st.floats(-1e6, 1e6, width=32, allow_nan=False),
        )
    )
    def test_roundtrip_property(self, tmp_path_factory, array):
        path = tmp_path_factory.mktemp("rt") / "a.npy"
        write_tensor(array, path)
        assert read_tensor(path).tobytes() == array.tobytes()


class TestNumpyInterop:
    """numpy's reader/writer as the independent reference implementation."""

    @pytest.mark.parametrize(
        "array",
        [
            np.arange(12, dtype=np.float32).reshape(3, 4),
            np.arange(5, dtype=np.int64),
            np.array([[1, 0], [0, 1]], dtype=np.uint8),
            np.arange(6, dtype=np.float64),
            np.zeros((576, 1024), dtype=np.float32),
        ],
        ids=["f4-2d", "i8-1d", "u1-2d", "f8-1d", "grid-sized"],
    )
    def test_bytes_match_numpy(self, tmp_path, array):
        ours = write_tensor(array, tmp_path / "a.npy").read_bytes()
        assert ours == numpy_save_bytes(array)

    def test_numpy_reads_our_files(self, tmp_path):
        array = np.random.default_rng(0).random((6, 2), dtype=np.float32)
        path = write_tensor(array, tmp_path / "a.npy")
        loaded = np.load(path)
        assert loaded.dtype == array.dtype
        np.testing.assert_array_equal(loaded, array)

    def test_we_read_numpy_files(self, tmp_path):
        array = np.random.default_rng(1).random((3, 5)).astype(np.float32)
        path = tmp_path / "np.npy"
        np.save(path, array)
        out = read_tensor(path)
        assert out.tobytes() == array.tobytes()

    def test_expected_file_size(self, tmp_path):
        # 128-byte header block + 576*1024 little-endian float32 values.
        array = np.zeros((576, 1024), dtype=np.float32)
        path = write_tensor(array, tmp_path / "a.npy")
        assert path.stat().st_size == 128 + 576 * 1024 * 4


class TestWriteValidation:
    def test_rejects_unsupported_dtype(self, tmp_path):
        with pytest.raises(ParameterError, match="unsupported array dtype"):
            write_tensor(np.zeros(3, dtype=np.int32), tmp_path / "a.npy")

    def test_rejects_rank_3(self, tmp_path):
        with pytest.raises(ParameterError, match="rank"):
            write_tensor(np.zeros((2, 2, 2), dtype=np.float32), tmp_path / "a.npy")

    def test_rejects_non_finite(self, tmp_path):
        with pytest.raises(ParameterError, match="non-finite"):
            write_tensor(np.array([np.nan], dtype=np.float32), tmp_path / "a.npy")


class TestReadErrors:
    def _valid_bytes(self) -> bytes:
        return numpy_save_bytes(np.arange(12, dtype=np.float32).reshape(3, 4))

    def _write(self, tmp_path, data: bytes):
        path = tmp_path / "bad.npy"
        path.write_bytes(data)
        return path

    def test_bad_magic_offset_zero(self, tmp_path):
        path = self._write(tmp_path, b"NOTNPY" + self._valid_bytes()[6:])
        with pytest.raises(TensorFormatError, match="magic") as excinfo:
            read_tensor(path)
        assert excinfo.value.offset == 0

    def test_bad_version_offset_six(self, tmp_path):
        data = bytearray(self._valid_bytes())
        data[6:8] = b"\x02\x00"
        with pytest.raises(TensorFormatError, match="version") as excinfo:
            read_tensor(self._write(tmp_path, bytes(data)))
        assert excinfo.value.offset == 6

    def test_truncated_header(self, tmp_path):
        data = self._valid_bytes()[:40]
        with pytest.raises(TensorFormatError, match="truncated header") as excinfo:
            read_tensor(self._write(tmp_path, data))
        assert excinfo.value.offset == 40

    def test_header_not_a_dict(self, tmp_path):
        data = bytearray(self._valid_bytes())
        header_len = int.from_bytes(data[8:10], "little")
        data[10 : 10 + header_len] = b"[1, 2, 3]".ljust(header_len - 1) + b"\n"
        with pytest.raises(TensorFormatError, match="dict"):
            read_tensor(self._write(tmp_path, bytes(data)))

    def test_unknown_descr(self, tmp_path):
        path = tmp_path / "c16.npy"
        np.save(path, np.zeros(2, dtype=np.complex64))
        with pytest.raises(TensorFormatError, match="unsupported dtype descriptor"):
            read_tensor(path)

    def test_fortran_order_rejected(self, tmp_path):
        path = tmp_path / "f.npy"
        np.save(path, np.asfortranarray(np.arange(6, dtype=np.float32).reshape(2, 3)))
        with pytest.raises(TensorFormatError, match="fortran_order"):
            read_tensor(path)

    def test_rank_3_rejected_on_read(self, tmp_path):
        path = tmp_path / "r3.npy"
        np.save(path, np.zeros((2, 2, 2), dtype=np.float32))
        with pytest.raises(TensorFormatError, match="rank"):
            read_tensor(path)

    def test_payload_shorter_than_shape(self, tmp_path):
        # Header declares 3x4 floats but the payload holds only 10.
        data = self._valid_bytes()[:-8]
        with pytest.raises(ShapeError, match=r"\(3, 4\).*10"):
            read_tensor(self._write(tmp_path, data))

    def test_payload_longer_than_shape(self, tmp_path):
        data = self._valid_bytes() + b"\x00\x00\x00\x00"
        with pytest.raises(ShapeError, match="payload"):
            read_tensor(self._write(tmp_path, data))

    def test_expected_shape_mismatch(self, tmp_path):
        path = write_tensor(np.zeros((3, 4), dtype=np.float32), tmp_path / "a.npy")
        with pytest.raises(ShapeError, match="expected shape"):
            read_tensor(path, expected_shape=(4, 3))

    def test_expected_dtype_mismatch(self, tmp_path):
        path = write_tensor(np.zeros(3, dtype=np.float32), tmp_path / "a.npy")
        with pytest.raises(ShapeError, match="expected dtype"):
            read_tensor(path, expected_dtype=np.int64)

    def test_missing_file_has_path_in_error(self, tmp_path):
        with pytest.raises(OSError, match="nope.npy"):
            read_tensor(tmp_path / "nope.npy")

    def test_read_header_size_check(self, tmp_path):
        path = write_tensor(np.zeros((3, 4), dtype=np.float32), tmp_path / "a.npy")
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ShapeError, match="file holds"):
            read_header(path)


class TestFeatureTensor:
    def test_grid_must_match_token_count(self):
        with pytest.raises(ShapeError, match="grid"):
            FeatureTensor(tokens=np.zeros((4, 2), dtype=np.float32), grid=(3, 2))

    def test_rejects_non_finite(self):
        bad = np.array([[1.0, np.inf]], dtype=np.float32)
        with pytest.raises(ParameterError, match="non-finite"):
            FeatureTensor(tokens=bad, grid=(1, 1))

    def test_read_feature_tensor_checks_dim(self, tmp_path):
        path = write_tensor(np.zeros((4, 3), dtype=np.float32), tmp_path / "t.npy")
        with pytest.raises(ShapeError, match="channels"):
            read_feature_tensor(path, (2, 2), expected_dim=5)

    def test_read_vector_rejects_matrix(self, tmp_path):
        path = write_tensor(np.zeros((2, 2), dtype=np.float32), tmp_path / "m.npy")
        with pytest.raises(ShapeError, match="rank-1"):
            read_vector(path)


class TestManifest:
    def test_loads_valid_dataset(self, tmp_path):
        manifest = load_manifest(tiny_dataset(tmp_path))
        assert manifest.category == "widget"
        assert manifest.grid == (4, 4)
        assert manifest.dims == (6, 5)
        assert len(manifest.support) == 3
        assert [e.label for e in manifest.test] == [0, 1]
        assert manifest.test[1].mask is not None

    def test_support_of_sixty_four(self, tmp_path):
        rng = np.random.default_rng(0)
        path = write_dataset(
            tmp_path,
            [rng.standard_normal((4, 3)).astype(np.float32) for _ in range(64)],
            [],
            rng.standard_normal(2).astype(np.float32),
            rng.standard_normal(2).astype(np.float32),
            grid=(2, 2),
            image_size=(4, 4),
        )
        assert len(load_manifest(path).support) == 64

    def test_missing_field_named(self, tmp_path):
        path = tiny_dataset(tmp_path)
        raw = json.loads(path.read_text())
        del raw["grid"]
        path.write_text(json.dumps(raw))
        with pytest.raises(SchemaError, match="'grid'"):
            load_manifest(path)

    def test_unknown_field_named(self, tmp_path):
        path = tiny_dataset(tmp_path)
        raw = json.loads(path.read_text())
        raw["extra"] = 1
        path.write_text(json.dumps(raw))
        with pytest.raises(SchemaError, match="'extra'"):
            load_manifest(path)

    def test_bad_label_rejected(self, tmp_path):
        path = tiny_dataset(tmp_path)
        raw = json.loads(path.read_text())
        raw["test"][0]["label"] = 2
        path.write_text(json.dumps(raw))
        with pytest.raises(SchemaError, match="label"):
            load_manifest(path)

    def test_dangling_tensor_names_entry(self, tmp_path):
        path = tiny_dataset(tmp_path)
        (tmp_path / "support" / "s001.npy").unlink()
        with pytest.raises(ManifestValidationError, match="s001"):
            load_manifest(path)

    def test_wrong_token_count_rejected(self, tmp_path):
        # 575 tokens against a 24x24 grid: one token short.
        rng = np.random.default_rng(0)
        path = write_dataset(
            tmp_path,
            [rng.standard_normal((576, 8)).astype(np.float32)],
            [],
            rng.standard_normal(4).astype(np.float32),
            rng.standard_normal(4).astype(np.float32),
            grid=(24, 24),
            image_size=(48, 48),
        )
        write_tensor(
            rng.standard_normal((575, 8)).astype(np.float32),
            tmp_path / "support" / "s000.npy",
        )
        with pytest.raises(ManifestValidationError, match=r"\(576, 8\)"):
            load_manifest(path)

    def test_duplicate_id_rejected(self, tmp_path):
        path = tiny_dataset(tmp_path)
        raw = json.loads(path.read_text())
        raw["support"][1]["id"] = raw["support"][0]["id"]
        path.write_text(json.dumps(raw))
        with pytest.raises(ManifestValidationError, match="duplicate"):
            load_manifest(path)

    def test_id_with_slash_rejected(self, tmp_path):
        path = tiny_dataset(tmp_path)
        raw = json.loads(path.read_text())
        raw["test"][0]["id"] = "../evil"
        path.write_text(json.dumps(raw))
        with pytest.raises(SchemaError, match="id"):
            load_manifest(path)

    def test_empty_support_rejected(self, tmp_path):
        path = tiny_dataset(tmp_path)
        raw = json.loads(path.read_text())
        raw["support"] = []
        path.write_text(json.dumps(raw))
        with pytest.raises(SchemaError, match="support"):
            load_manifest(path)

    def test_mask_dtype_enforced(self, tmp_path):
        path = tiny_dataset(tmp_path)
        write_tensor(np.zeros((8, 8), dtype=np.float32), tmp_path / "masks" / "t001.npy")
        with pytest.raises(ManifestValidationError, match="u1"):
            load_manifest(path)

    def test_not_json(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("{nope")
        with pytest.raises(SchemaError, match="not valid JSON"):
            load_manifest(path)
