import numpy as np
import pytest

from slimnas.data import (
    DataError,
    DataSource,
    Dataset,
    DatasetSpec,
    NORM_MEAN,
    NORM_STD,
    TemplateStyle,
    ingest_dataset,
)


class TestSyntheticGeneration:
    def test_exact_counts(self):
        spec = DatasetSpec(num_classes=10, resolution=(8, 8), train_count=2000, val_count=400)
        ds = ingest_dataset(spec)
        assert ds.train_count == 2000
        assert ds.val_count == 400
        assert ds.train_x.shape == (2000, 3, 8, 8)
        assert ds.val_x.shape == (400, 3, 8, 8)

    def test_deterministic_given_seed(self):
        spec = DatasetSpec(train_count=64, val_count=32, seed=9)
        a, b = ingest_dataset(spec), ingest_dataset(spec)
        np.testing.assert_array_equal(a.train_x, b.train_x)
        np.testing.assert_array_equal(a.train_y, b.train_y)

    def test_different_seed_different_data(self):
        a = ingest_dataset(DatasetSpec(train_count=64, val_count=32, seed=0))
        b = ingest_dataset(DatasetSpec(train_count=64, val_count=32, seed=1))
        assert not np.allclose(a.train_x, b.train_x)

    def test_labels_cover_every_class(self):
        ds = ingest_dataset(DatasetSpec(num_classes=10, train_count=600, val_count=200))
        assert set(np.unique(ds.train_y)) == set(range(10))

    def test_pixels_follow_documented_normalisation(self):
        ds = ingest_dataset(DatasetSpec(train_count=200, val_count=50))
        lo = (0.0 - NORM_MEAN) / NORM_STD
        hi = (1.0 - NORM_MEAN) / NORM_STD
        assert ds.train_x.min() >= lo - 1e-6
        assert ds.train_x.max() <= hi + 1e-6

    @pytest.mark.parametrize(
        "style,extra",
        [
            (TemplateStyle.BLOBS, {}),
            (TemplateStyle.TEXTURE, {}),
            (TemplateStyle.TEXTURE, {"shared_vocab": 6}),
            (TemplateStyle.HYBRID, {"pixel_stat_classes": 4}),
        ],
    )
    def test_all_styles_generate(self, style, extra):
        ds = ingest_dataset(
            DatasetSpec(num_classes=6, train_count=120, val_count=60, style=style, **extra)
        )
        assert ds.train_count == 120
        assert set(np.unique(ds.train_y)) <= set(range(6))

    def test_spec_validation(self):
        with pytest.raises(DataError):
            DatasetSpec(num_classes=1)
        with pytest.raises(DataError):
            DatasetSpec(train_count=0)
        with pytest.raises(DataError):
            DatasetSpec(source=DataSource.DIRECTORY)
        with pytest.raises(DataError):
            DatasetSpec(style=TemplateStyle.TEXTURE, resolution=(9, 9), tile_size=2)
        with pytest.raises(DataError):
            DatasetSpec(scale_mix=(0.0, 0.0, 0.0))


class TestBatching:
    def make(self, n=100):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((n, 3, 4, 4)).astype(np.float32)
        y = (np.arange(n) % 5).astype(np.int64)
        return Dataset(x, y, x[:20], y[:20], 5)

    def test_same_seed_same_order_hash(self):
        ds = self.make()
        assert ds.batch_order_hash(32, seed=4) == ds.batch_order_hash(32, seed=4)
        assert ds.batch_order_hash(32, seed=4) != ds.batch_order_hash(32, seed=5)

    def test_train_batches_drop_trailing_partial(self):
        ds = self.make(100)
        batches = list(ds.train_batches(32, seed=0))
        assert len(batches) == 3
        assert all(len(x) == 32 for x, _ in batches)

    def test_val_batches_cover_everything(self):
        ds = self.make(100)
        total = sum(len(y) for _, y in ds.val_batches(8))
        assert total == 20

    def test_batches_match_order_hash_indices(self):
        ds = self.make(64)
        a = [y.tolist() for _, y in ds.train_batches(16, seed=7)]
        b = [y.tolist() for _, y in ds.train_batches(16, seed=7)]
        assert a == b


class TestDirectoryIngestion:
    def write_images(self, root, classes, per_class=4, size=(8, 8)):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        rng = np.random.default_rng(0)
        for c in range(classes):
            cdir = root / f"class_{c}"
            cdir.mkdir(parents=True)
            for i in range(per_class):
                img = rng.uniform(0, 1, (size[0], size[1], 3))
                plt.imsave(cdir / f"img_{i}.png", img)

    def test_round_trip(self, tmp_path):
        self.write_images(tmp_path, classes=3)
        spec = DatasetSpec(
            source=DataSource.DIRECTORY, path=str(tmp_path), num_classes=3,
            resolution=(8, 8), train_count=9, val_count=3,
        )
        ds = ingest_dataset(spec)
        assert ds.train_count == 9
        assert ds.val_count == 3
        assert set(np.unique(np.concatenate([ds.train_y, ds.val_y]))) == {0, 1, 2}

    def test_class_count_mismatch_is_an_error(self, tmp_path):
        self.write_images(tmp_path, classes=3)
        spec = DatasetSpec(
            source=DataSource.DIRECTORY, path=str(tmp_path), num_classes=10,
            resolution=(8, 8), train_count=9, val_count=3,
        )
        with pytest.raises(DataError, match="3 class folders"):
            ingest_dataset(spec)

    def test_unreadable_path_names_the_path(self, tmp_path):
        spec = DatasetSpec(
            source=DataSource.DIRECTORY, path=str(tmp_path / "missing"), num_classes=3,
            resolution=(8, 8), train_count=4, val_count=2,
        )
        with pytest.raises(DataError, match="missing"):
            ingest_dataset(spec)

    def test_resize_to_spec_resolution(self, tmp_path):
        self.write_images(tmp_path, classes=2, size=(12, 12))
        spec = DatasetSpec(
            source=DataSource.DIRECTORY, path=str(tmp_path), num_classes=2,
            resolution=(8, 8), train_count=6, val_count=2,
        )
        ds = ingest_dataset(spec)
        assert ds.train_x.shape[2:] == (8, 8)

    def test_insufficient_images_rejected(self, tmp_path):
        self.write_images(tmp_path, classes=2, per_class=2)
        spec = DatasetSpec(
            source=DataSource.DIRECTORY, path=str(tmp_path), num_classes=2,
            resolution=(8, 8), train_count=10, val_count=5,
        )
        with pytest.raises(DataError, match="spec needs 15"):
            ingest_dataset(spec)
