import json
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from core.datagen import (CORRUPTIONS, DatasetSpec, Sample, background_swap, background_swap_dataset, corrupt,
                          corrupt_dataset, export_dataset, generate_dataset, generate_sample, load_export, one_hot,
                          texture_swap, texture_swap_dataset, transform_labels, verify_export)
from core.exceptions import ConfigurationError, DataError, UsageError


class TestDatasetSpec:
    @pytest.mark.parametrize('overrides', [
        {'C': 1}, {'K': 0}, {'H': 6}, {'n_val': -1}, {'background': 'photo'},
        {'labels': 'keypoints'}, {'label_fraction': 1.5}, {'background_correlation': 2.0},
        {'C': 9}, {'grammar': ((2, 3), (1, 2))}, {'K': 2, 'C': 3},
    ])
    def test_rejects_invalid(self, overrides):
        with pytest.raises(ConfigurationError):
            DatasetSpec(**overrides)

    def test_label_channels(self):
        assert DatasetSpec(labels='object_seg').label_channels == 1
        assert DatasetSpec(labels='part_bbox').label_channels == 6

    def test_disjoint_index_ranges(self):
        spec = DatasetSpec(n_train=5, n_val=3, n_test=2)
        assert spec.offsets() == {'train': 0, 'val': 5, 'test': 8}


class TestGeneration:
    def test_shapes_and_ranges(self, tiny_data):
        train = tiny_data.train
        assert train.x.shape == (48, 3, 16, 16)
        assert train.labels.shape == (48, 16, 16)
        assert np.all((train.x >= 0) & (train.x <= 1))
        assert train.labels.max() <= 6

    def test_deterministic(self, tiny_spec):
        a = generate_sample(tiny_spec, 17, 1)
        b = generate_sample(tiny_spec, 17, 1)
        assert_array_equal(a.x, b.x)
        assert_array_equal(a.labels, b.labels)

    def test_seed_changes_samples(self, tiny_spec):
        other = DatasetSpec(C=2, K=6, H=16, W=16, seed=tiny_spec.seed + 1)
        assert not np.array_equal(generate_sample(tiny_spec, 0, 0).x, generate_sample(other, 0, 0).x)

    def test_split_matches_single_samples(self, tiny_spec, tiny_data):
        val = tiny_data.val
        sample = generate_sample(tiny_spec, int(val.ids[3]), int(val.y[3]))
        assert_array_equal(val.x[3], sample.x)

    def test_class_balance(self, tiny_data):
        assert np.bincount(tiny_data.train.y).tolist() == [24, 24]

    def test_masks_are_one_hot(self, tiny_data):
        masks = tiny_data.train.masks(slice(0, 5))
        assert masks.shape == (5, 7, 16, 16)
        assert_array_equal(masks.sum(axis=1), 1.0)
        assert set(np.unique(masks)) <= {0.0, 1.0}

    def test_every_class_draws_its_parts(self, tiny_spec, tiny_data):
        train = tiny_data.train
        grammar = tiny_spec.class_parts()
        for i in range(len(train)):
            present = set(np.unique(train.labels[i])) - {0}
            assert present <= set(grammar[train.y[i]])
            assert 1 in present

    def test_image_follows_mask(self, tiny_data):
        s = tiny_data.train.sample(0)
        assert s.foreground.any() and (~s.foreground).any()
        assert_array_equal(s.M.argmax(axis=0), s.labels)

    def test_one_hot_rejects_large_index(self):
        with pytest.raises(DataError):
            one_hot(np.array([[0, 4]]), 3)

    def test_unknown_split(self, tiny_data):
        with pytest.raises(UsageError):
            tiny_data['holdout']


class TestCorruptions:
    def test_severity_zero_is_identity(self, tiny_data):
        x = tiny_data.test.x[:2]
        for kind in CORRUPTIONS:
            assert_array_equal(corrupt(x, kind, 0), x)

    def test_output_range(self, tiny_data):
        x = tiny_data.test.x[:2]
        for kind in CORRUPTIONS:
            for severity in range(1, 6):
                out = corrupt(x, kind, severity, seed=1)
                assert out.shape == x.shape
                assert np.all((out >= 0) & (out <= 1))

    def test_gaussian_noise_std(self):
        x = np.full((3, 64, 64), 0.5)
        out = corrupt(x, 'gaussian_noise', 3, seed=0)
        assert np.std(out - x) == pytest.approx(0.08, rel=0.05)

    def test_brightness_shift(self):
        x = np.full((3, 8, 8), 0.2)
        assert_allclose(corrupt(x, 'brightness', 2), 0.3)

    def test_contrast_keeps_mean(self, rng):
        x = rng.uniform(0.3, 0.7, size=(3, 8, 8))
        assert corrupt(x, 'contrast', 4).mean() == pytest.approx(x.mean())

    def test_blur_smooths(self, rng):
        x = rng.random((3, 16, 16))
        assert corrupt(x, 'blur', 5).std() < x.std()

    def test_pixelate_blocks(self, rng):
        x = rng.random((3, 16, 16))
        out = corrupt(x, 'pixelate', 5)
        assert len(np.unique(out[0])) <= 64

    def test_invalid(self):
        with pytest.raises(UsageError):
            corrupt(np.zeros((3, 8, 8)), 'fog', 1)
        with pytest.raises(ConfigurationError):
            corrupt(np.zeros((3, 8, 8)), 'blur', 6)

    def test_dataset_corruption_is_per_sample(self, tiny_data):
        test = tiny_data.test
        whole = corrupt_dataset(test, 'gaussian_noise', 2, seed=5)
        part = corrupt_dataset(test.subset(np.arange(3, 6)), 'gaussian_noise', 2, seed=5)
        assert_array_equal(whole.x[3:6], part.x)
        assert_array_equal(whole.labels, test.labels)


class TestSwaps:
    def test_background_swap_keeps_foreground(self, tiny_data):
        s, donor = tiny_data.train.sample(0), tiny_data.train.sample(1)
        assert s.y != donor.y
        swapped = background_swap(s, donor)
        fg = s.foreground
        assert_array_equal(swapped.x[:, fg], s.x[:, fg])
        assert_array_equal(swapped.x[:, ~fg], donor.x[:, ~fg])
        assert_array_equal(swapped.labels, s.labels)

    def test_background_swap_rejects_same_class(self, tiny_data):
        s = tiny_data.train.sample(0)
        with pytest.raises(UsageError):
            background_swap(s, s)

    def test_background_swap_dataset(self, tiny_spec, tiny_data):
        test = tiny_data.test
        swapped = background_swap_dataset(test, tiny_spec, seed=1)
        fg = test.labels > 0
        assert_array_equal(np.moveaxis(swapped.x, 1, -1)[fg], np.moveaxis(test.x, 1, -1)[fg])
        assert not np.array_equal(swapped.x, test.x)

    def test_texture_swap_keeps_background_and_labels(self, tiny_data):
        s = tiny_data.train.sample(2)
        swapped = texture_swap(s, 7, n_classes=2)
        bg = ~s.foreground
        assert_array_equal(swapped.x[:, bg], s.x[:, bg])
        assert_array_equal(swapped.labels, s.labels)
        assert not np.array_equal(swapped.x[:, ~bg], s.x[:, ~bg])

    def test_texture_swap_dataset_deterministic(self, tiny_data):
        a = texture_swap_dataset(tiny_data.test, 2, seed=3)
        b = texture_swap_dataset(tiny_data.test, 2, seed=3)
        assert_array_equal(a.x, b.x)


class TestLabelTransforms:
    def test_part_bbox_covers_parts(self, tiny_data):
        boxed = transform_labels(tiny_data.train, 'part_bbox', seed=0)
        original = tiny_data.train.labels
        assert boxed.K == 6
        assert np.all(boxed.labels[original > 0] > 0)
        assert (boxed.labels > 0).sum() >= (original > 0).sum()

    def test_object_seg(self, tiny_data):
        fg = transform_labels(tiny_data.train, 'object_seg', seed=0)
        assert fg.K == 1
        assert_array_equal(fg.labels, (tiny_data.train.labels > 0).astype(np.uint8))
        assert fg.masks(slice(0, 2)).shape == (2, 2, 16, 16)

    def test_drop_fraction(self, tiny_data):
        kept = transform_labels(tiny_data.train, 'drop_fraction', seed=0, fraction=0.25)
        assert kept.seg_weight.sum() == 12
        assert set(np.unique(kept.seg_weight)) <= {0.0, 1.0}
        assert_array_equal(kept.labels, tiny_data.train.labels)

    def test_drop_fraction_needs_fraction(self, tiny_data):
        with pytest.raises(ConfigurationError):
            transform_labels(tiny_data.train, 'drop_fraction', seed=0)

    def test_unknown_mode(self, tiny_data):
        with pytest.raises(UsageError):
            transform_labels(tiny_data.train, 'keypoints', seed=0)

    def test_spec_applies_label_fraction_to_train_only(self):
        splits = generate_dataset(DatasetSpec(C=2, H=8, W=8, n_train=10, n_val=4, n_test=4, label_fraction=0.5))
        assert splits.train.seg_weight.sum() == 5
        assert splits.val.seg_weight.sum() == 4


class TestExport:
    @pytest.fixture
    def small(self):
        return generate_dataset(DatasetSpec(C=3, H=8, W=8, n_train=6, n_val=3, n_test=3, seed=2))

    def test_files_and_manifest(self, small, tmp_path):
        paths = export_dataset(small, str(tmp_path))
        assert set(paths) == {'train', 'val', 'test', 'manifest'}
        meta = json.loads((tmp_path / 'manifest.json').read_text())
        assert meta['counts'] == {'train': 6, 'val': 3, 'test': 3}
        assert meta['indices']['val'] == [6, 9]
        record = 4 + 4 * 3 * 8 * 8 + 8 * 8
        assert os.path.getsize(paths['train']) == 6 * record

    def test_load_matches_generation(self, small, tmp_path):
        export_dataset(small, str(tmp_path))
        loaded = load_export(str(tmp_path))
        assert loaded.spec == small.spec
        assert_allclose(loaded.test.x, small.test.x, atol=1e-7)
        assert_array_equal(loaded.test.labels, small.test.labels)
        assert_array_equal(loaded.val.ids, small.val.ids)

    def test_load_restores_label_weights(self, tmp_path):
        splits = generate_dataset(DatasetSpec(C=2, H=8, W=8, n_train=8, n_val=2, n_test=2, label_fraction=0.5))
        export_dataset(splits, str(tmp_path))
        assert_array_equal(load_export(str(tmp_path)).train.seg_weight, splits.train.seg_weight)

    def test_verify(self, small, tmp_path):
        paths = export_dataset(small, str(tmp_path))
        assert verify_export(str(tmp_path))
        with open(paths['val'], 'r+b') as handle:
            handle.seek(10)
            handle.write(b'\x00\x01')
        assert not verify_export(str(tmp_path))

    def test_truncated_shard(self, small, tmp_path):
        paths = export_dataset(small, str(tmp_path))
        with open(paths['test'], 'r+b') as handle:
            handle.truncate(100)
        with pytest.raises(DataError):
            load_export(str(tmp_path))


def test_sample_one_hot_matches_dataset(tiny_data):
    s = tiny_data.train.sample(4)
    assert isinstance(s, Sample)
    assert_array_equal(s.M, tiny_data.train.masks(4))


def test_fingerprint_follows_content(tiny_data):
    test = tiny_data.test
    assert test.fingerprint() == test.subset(np.arange(len(test))).fingerprint()
    shifted = test.with_images(np.clip(test.x + 0.01, 0.0, 1.0))
    assert shifted.fingerprint() != test.fingerprint()
    solid = DatasetSpec(C=2, H=16, W=16, n_train=4, n_val=4, n_test=8, seed=5, background='solid')
    textured = DatasetSpec(C=2, H=16, W=16, n_train=4, n_val=4, n_test=8, seed=5, background='textured')
    assert generate_dataset(solid).test.fingerprint() != generate_dataset(textured).test.fingerprint()
