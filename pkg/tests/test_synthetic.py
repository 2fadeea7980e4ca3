"""Synthetic benchmark generator."""

import numpy as np
import pytest

from sparsead import (
    ParameterError,
    channel_variance,
    generate_benchmark,
    load_manifest,
    synthesize,
)


def small_kwargs(**overrides):
    kwargs = dict(
        n_support=6,
        n_test_normal=3,
        n_test_anomalous=3,
        dim=64,
        joint_dim=8,
        grid=(4, 4),
        n_signal=12,
        patch_pixels=4,
        defect_channels=4,
    )
    kwargs.update(overrides)
    return kwargs


class TestSynthesize:
    def test_shapes_and_counts(self):
        data = synthesize(0, **small_kwargs())
        assert len(data.support) == 6
        assert len(data.test_visual) == len(data.test_joint) == 6
        assert sorted(data.labels) == [0, 0, 0, 1, 1, 1]
        assert data.support[0].tokens.shape == (16, 64)
        assert data.test_joint[0].tokens.shape == (16, 8)
        assert data.image_size == (16, 16)
        assert data.dims == (64, 8)
        assert data.signal_channels.shape == (12,)

    def test_masks_follow_labels(self):
        data = synthesize(1, **small_kwargs())
        for label, mask in zip(data.labels, data.pixel_masks):
            if label == 0:
                assert mask is None
            else:
                assert mask.shape == data.image_size
                assert mask.dtype == np.uint8
                assert mask.any()
                assert set(np.unique(mask)) <= {0, 1}

    def test_mask_is_token_block_footprint(self):
        data = synthesize(2, **small_kwargs())
        mask = next(m for m in data.pixel_masks if m is not None)
        # The footprint is a solid rectangle whose sides are multiples of the
        # patch size.
        rows = np.nonzero(mask.any(axis=1))[0]
        cols = np.nonzero(mask.any(axis=0))[0]
        assert mask[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1].all()
        assert len(rows) % 4 == 0 and len(cols) % 4 == 0

    def test_signal_channels_dominate_variance(self):
        # The generator's contract: structured channels have variance ~1,
        # noise channels ~0.09, so a variance profile finds exactly them.
        data = synthesize(3, **small_kwargs())
        profile = channel_variance(data.support)
        chosen = np.zeros(64, dtype=bool)
        chosen[data.signal_channels] = True
        assert profile.sigma2[chosen].min() > profile.sigma2[~chosen].max()

    def test_defect_is_sparse_in_channels(self):
        # Anomalous tokens deviate strongly on only a few signal channels.
        data = synthesize(4, **small_kwargs())
        idx = data.labels.index(1)
        visual = data.test_visual[idx].tokens
        mask = data.pixel_masks[idx]
        token_mask = mask[::4, ::4].astype(bool).ravel()
        defect_rows = visual[token_mask][:, data.signal_channels]
        # Amplitude-3 channels stand out against unit-variance prototypes.
        hot = (np.abs(defect_rows) > 2.0).any(axis=0)
        assert 1 <= hot.sum() <= 8

    def test_determinism_in_memory(self):
        a = synthesize(7, **small_kwargs())
        b = synthesize(7, **small_kwargs())
        assert a.labels == b.labels
        np.testing.assert_array_equal(a.signal_channels, b.signal_channels)
        for ta, tb in zip(a.support, b.support):
            assert ta.tokens.tobytes() == tb.tokens.tobytes()
        for ta, tb in zip(a.test_joint, b.test_joint):
            assert ta.tokens.tobytes() == tb.tokens.tobytes()

    def test_seeds_differ(self):
        a = synthesize(0, **small_kwargs())
        b = synthesize(1, **small_kwargs())
        assert a.support[0].tokens.tobytes() != b.support[0].tokens.tobytes()

    @pytest.mark.parametrize(
        "overrides",
        [
            {"n_signal": 0},
            {"n_signal": 65},
            {"defect_channels": 13},
            {"n_prototypes": 1},
            {"grid": (2, 4)},
            {"n_support": 0},
        ],
        ids=["signal-0", "signal-gt-dim", "defect-gt-signal", "one-proto", "tiny-grid", "no-support"],
    )
    def test_parameter_validation(self, overrides):
        with pytest.raises(ParameterError):
            synthesize(0, **small_kwargs(**overrides))


class TestGenerateBenchmark:
    def test_manifest_validates_and_matches(self, tmp_path):
        path = generate_benchmark(tmp_path, seed=0, **small_kwargs())
        manifest = load_manifest(path)  # full file checks included
        assert manifest.category == "synthetic"
        assert manifest.grid == (4, 4)
        assert manifest.dims == (64, 8)
        assert len(manifest.support) == 6
        assert len(manifest.test) == 6
        labels = [e.label for e in manifest.test]
        assert sorted(labels) == [0, 0, 0, 1, 1, 1]
        for entry in manifest.test:
            assert (entry.mask is not None) == (entry.label == 1)
        assert "normal" in manifest.text.templates["normal"]

    def test_regeneration_is_byte_identical(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        generate_benchmark(a_dir, seed=5, **small_kwargs())
        generate_benchmark(b_dir, seed=5, **small_kwargs())
        a_files = sorted(p.relative_to(a_dir) for p in a_dir.rglob("*") if p.is_file())
        b_files = sorted(p.relative_to(b_dir) for p in b_dir.rglob("*") if p.is_file())
        assert a_files == b_files and len(a_files) > 10
        for rel in a_files:
            assert (a_dir / rel).read_bytes() == (b_dir / rel).read_bytes(), rel

    def test_on_disk_matches_in_memory(self, tmp_path):
        path = generate_benchmark(tmp_path, seed=9, **small_kwargs())
        data = synthesize(9, **small_kwargs())
        manifest = load_manifest(path)
        from sparsead import read_tensor

        first = read_tensor(manifest.resolve(manifest.support[0].tensor))
        assert first.tobytes() == data.support[0].tokens.tobytes()
        joint = read_tensor(manifest.resolve(manifest.test[2].joint_tensor))
        assert joint.tobytes() == data.test_joint[2].tokens.tobytes()
