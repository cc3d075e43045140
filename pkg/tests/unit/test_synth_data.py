"""
Unit tests for the synthetic scene generator and dataset view.
"""
import numpy as np
import pytest

from errors import DatasetError
from schemas import RunConfig
from services.synth_data import (gen_dataset, gen_scene, load_dataset, make_sample, optical_class_mean,
                                 render_optical, render_sar, sar_backscatter, scene_labels, speckle,
                                 standardize)
from tests.utils.test_helpers import tiny_model, tiny_run


class TestScene:
    """Test scene generation and labels."""

    def test_labels_follow_class_map(self, rng):
        """Test presence bits and majority class."""
        scene = gen_scene(rng, 16, 16, K=4, n_blobs=3)
        multilabel, majority = scene_labels(scene)
        present = set(np.unique(scene.class_map).tolist())
        assert set(np.flatnonzero(multilabel).tolist()) == present
        counts = np.bincount(scene.class_map.reshape(-1), minlength=4)
        assert majority == int(np.argmax(counts))

    def test_blob_classes_are_foreground(self, rng):
        """Test that blobs never paint the background class."""
        scene = gen_scene(rng, 16, 16, K=3, n_blobs=8)
        assert all(1 <= k < 3 for k in scene.classes)

    def test_every_class_appears_over_seeds(self):
        """Test that 100 seeded scenes at the default size cover all K classes."""
        seen = set()
        for seed in range(100):
            scene = gen_scene(np.random.default_rng(seed), 32, 32, K=6, n_blobs=5)
            seen |= set(np.unique(scene.class_map).tolist())
        assert seen == set(range(6))

    def test_middle_covered_corners_background(self):
        """Test centered placement: the middle pixels are foreground, the corners background."""
        for seed in range(50):
            class_map = gen_scene(np.random.default_rng(seed), 32, 32, K=6, n_blobs=5).class_map
            assert np.all(class_map[15:17, 15:17] > 0)
            assert class_map[0, 0] == class_map[0, 31] == class_map[31, 0] == class_map[31, 31] == 0

    def test_invalid_arguments(self, rng):
        """Test K and blob-count validation."""
        with pytest.raises(ValueError):
            gen_scene(rng, 8, 8, K=1, n_blobs=2)
        with pytest.raises(ValueError):
            gen_scene(rng, 8, 8, K=3, n_blobs=0)


class TestRendering:
    """Test the modality renderers."""

    def test_class_lookups_in_range(self):
        """Test reflectance and backscatter bounds."""
        for k in range(1, 6):
            for c in range(4):
                assert 0.75 <= optical_class_mean(k, c) <= 0.95
                assert 0.1 <= sar_backscatter(k, c) <= 1.0

    def test_background_darkest_in_every_channel(self):
        """Test that class 0 is below every foreground class in both modalities."""
        for c in range(4):
            assert optical_class_mean(0, c) < min(optical_class_mean(k, c) for k in range(1, 6))
            assert sar_backscatter(0, c) < min(sar_backscatter(k, c) for k in range(1, 6))

    def test_optical_standardized_per_channel(self):
        """Test zero mean and unit variance of each optical channel of a sample."""
        config = RunConfig()
        for index in range(5):
            image = make_sample(index, 7, config.model, config.data).image_2.astype(np.float64)
            np.testing.assert_allclose(image.mean(axis=(0, 1)), np.zeros(4), atol=1e-5)
            np.testing.assert_allclose(image.std(axis=(0, 1)), np.ones(4), atol=1e-4)

    def test_pixels_separable_by_class_means(self):
        """Test that nearest-class-mean pixel classification beats chance and the majority class."""
        K, C_1, C_2 = 6, 2, 4
        features, labels = [], []
        for seed in range(40):
            rng = np.random.default_rng(seed)
            scene = gen_scene(rng, 32, 32, K=K, n_blobs=5)
            sar = render_sar(scene, rng, C_1, looks=4.0, standardized=False)
            optical = render_optical(scene, rng, C_2, noise_sigma=0.25, standardized=False)
            features.append(np.concatenate([sar, optical], axis=-1).reshape(-1, C_1 + C_2))
            labels.append(scene.class_map.reshape(-1))
        train_x, test_x = np.concatenate(features[:20]), np.concatenate(features[20:])
        train_y, test_y = np.concatenate(labels[:20]), np.concatenate(labels[20:])

        means = np.stack([train_x[train_y == k].mean(axis=0) for k in range(K)])
        distances = ((test_x[:, None, :] - means[None]) ** 2).sum(axis=-1)
        accuracy = float(np.mean(np.argmin(distances, axis=1) == test_y))
        majority = np.bincount(test_y, minlength=K).max() / test_y.size
        assert accuracy > 1.0 / K
        assert accuracy > majority

    def test_speckle_mean_one(self, rng):
        """Test that Gamma speckle has unit mean."""
        assert speckle(rng, (200_000,), looks=4.0).mean() == pytest.approx(1.0, abs=0.01)

    def test_infinite_looks_is_noise_free(self, rng):
        """Test the speckle-free limit."""
        scene = gen_scene(rng, 8, 8, K=3, n_blobs=2)
        image = render_sar(scene, rng, 2, looks=float("inf"), standardized=False)
        np.testing.assert_allclose(image[..., 0], np.log([[sar_backscatter(k, 0) for k in row]
                                                          for row in scene.class_map]), rtol=1e-6)

    def test_standardize_constant_channel(self):
        """Test that a constant channel is centered, not divided by zero."""
        image = np.stack([np.full((4, 4), 3.0), np.arange(16.0).reshape(4, 4)], axis=-1)
        out = standardize(image)
        np.testing.assert_array_equal(out[..., 0], np.zeros((4, 4)))
        assert out[..., 1].std() == pytest.approx(1.0)


class TestSamples:
    """Test per-sample determinism."""

    def test_same_seed_same_sample(self):
        """Test that sample i regenerates bit-identically."""
        config = tiny_run()
        a = make_sample(5, 11, config.model, config.data)
        b = make_sample(5, 11, config.model, config.data)
        np.testing.assert_array_equal(a.image_1, b.image_1)
        np.testing.assert_array_equal(a.image_2, b.image_2)

    def test_sample_shapes(self):
        """Test image extents and label width."""
        config = tiny_run()
        s = make_sample(0, 0, config.model, config.data)
        assert s.image_1.shape == (8, 8, 2) and s.image_1.dtype == np.float32
        assert s.image_2.shape == (8, 8, 3)
        assert s.multilabel.shape == (3,)


class TestDataset:
    """Test the dataset file and in-memory view."""

    def test_file_matches_samples(self, dataset, run_config):
        """Test that stored samples equal regenerated ones."""
        for i in (0, 7, 15):
            expected = make_sample(i, 7, run_config.model, run_config.data)
            np.testing.assert_array_equal(dataset[i].image_2, expected.image_2)
            assert dataset[i].single_label == expected.single_label

    def test_workers_do_not_change_bytes(self, tmp_path, run_config, dataset_path):
        """Test that threaded generation writes the same file."""
        other = tmp_path / "threaded.fmds"
        gen_dataset(run_config.data.n, 7, run_config.model, run_config.data, str(other), workers=3)
        assert other.read_bytes() == dataset_path.read_bytes()

    def test_index_out_of_range(self, dataset):
        """Test sample index bounds."""
        with pytest.raises(IndexError):
            dataset[len(dataset)]

    def test_split_partitions(self, dataset):
        """Test that the seeded split is disjoint and covering."""
        train, test = dataset.split(0.25, seed=1)
        assert len(train) + len(test) == len(dataset)
        assert not set(train.indices) & set(test.indices)
        assert len(test) == 4

    def test_incompatible_model(self, dataset):
        """Test that the dataset refuses a model of another tile size."""
        with pytest.raises(DatasetError):
            dataset.check_compatible(tiny_model(H=16, W=16))

    def test_reload(self, dataset_path, dataset):
        """Test that loading twice gives the same labels."""
        again = load_dataset(str(dataset_path))
        np.testing.assert_array_equal(again.multilabels(), dataset.multilabels())
