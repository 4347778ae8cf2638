"""Dataset parsing, augmentation and batch iteration."""

import gzip
import hashlib

import numpy as np
import pytest

from sdbnn import data as D

from conftest import make_synthetic_digits, real_dataset_root, require_real


class TestIdxFormat:
    def test_round_trip_bytes(self, synth_mnist_root):
        name = D.MNIST_FILES["train"][0]
        blob = (synth_mnist_root / name).read_bytes()
        images = D.parse_idx_images(blob)
        assert D.serialize_idx_images(images) == blob

    def test_label_round_trip(self, synth_mnist_root):
        name = D.MNIST_FILES["train"][1]
        blob = (synth_mnist_root / name).read_bytes()
        labels = D.parse_idx_labels(blob)
        assert D.serialize_idx_labels(labels) == blob

    def test_bad_magic(self):
        images, _ = make_synthetic_digits(3, 0)
        blob = bytearray(D.serialize_idx_images(images))
        blob[3] = 0x07
        with pytest.raises(D.DataFormatError):
            D.parse_idx_images(bytes(blob))

    def test_truncated_file(self):
        images, _ = make_synthetic_digits(3, 0)
        blob = D.serialize_idx_images(images)[:-5]
        with pytest.raises(D.DataFormatError):
            D.parse_idx_images(blob)

    def test_loader_shapes(self, synth_mnist):
        train, test = synth_mnist
        assert train.images.shape == (2000, 1, 28, 28)
        assert test.images.shape == (600, 1, 28, 28)
        assert train.labels.shape == (2000,)

    def test_gzip_files_accepted(self, tmp_path):
        images, labels = make_synthetic_digits(5, 1)
        img_name, lbl_name = D.MNIST_FILES["test"]
        img_blob = D.serialize_idx_images(images)
        (tmp_path / (img_name + ".gz")).write_bytes(gzip.compress(img_blob))
        (tmp_path / (lbl_name + ".gz")).write_bytes(gzip.compress(D.serialize_idx_labels(labels)))
        ds = D.load(D.DatasetSource(kind="mnist", root=tmp_path, split="test", verify=False))
        assert len(ds) == 5

    def test_checksum_mismatch_rejected(self, tmp_path):
        images, labels = make_synthetic_digits(5, 1)
        img_name, lbl_name = D.MNIST_FILES["test"]
        (tmp_path / (img_name + ".gz")).write_bytes(gzip.compress(D.serialize_idx_images(images)))
        (tmp_path / (lbl_name + ".gz")).write_bytes(gzip.compress(D.serialize_idx_labels(labels)))
        src = D.DatasetSource(kind="mnist", root=tmp_path, split="test",
                              digests={img_name: "0" * 32})
        with pytest.raises(D.ChecksumError):
            D.load(src)

    def test_checksum_match_accepted(self, tmp_path):
        images, labels = make_synthetic_digits(5, 1)
        img_name, lbl_name = D.MNIST_FILES["test"]
        img_gz = gzip.compress(D.serialize_idx_images(images))
        lbl_gz = gzip.compress(D.serialize_idx_labels(labels))
        (tmp_path / (img_name + ".gz")).write_bytes(img_gz)
        (tmp_path / (lbl_name + ".gz")).write_bytes(lbl_gz)
        src = D.DatasetSource(kind="mnist", root=tmp_path, split="test",
                              digests={img_name: hashlib.md5(img_gz).hexdigest(),
                                       lbl_name: hashlib.md5(lbl_gz).hexdigest()})
        assert len(D.load(src)) == 5

    def test_missing_file_clear_error(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            D.load(D.DatasetSource(kind="mnist", root=tmp_path, split="train"))


class TestCifarFormat:
    def test_record_layout(self, synth_cifar_root):
        ds = D.load(D.DatasetSource(kind="cifar10", root=synth_cifar_root, split="train"))
        assert ds.images.shape == (1000, 3, 32, 32)  # 5 batches x 200
        assert ds.labels.max() <= 9

    def test_test_split(self, synth_cifar_root):
        ds = D.load(D.DatasetSource(kind="cifar10", root=synth_cifar_root, split="test"))
        assert ds.images.shape == (200, 3, 32, 32)

    def test_serialize_round_trip(self):
        rng = np.random.default_rng(2)
        images = rng.integers(0, 256, (7, 3, 32, 32)).astype(np.uint8)
        labels = rng.integers(0, 10, 7).astype(np.uint8)
        blob = D.serialize_cifar_batch(images, labels)
        got_i, got_l = D.parse_cifar_batch(blob)
        np.testing.assert_array_equal(images, got_i)
        np.testing.assert_array_equal(labels, got_l)

    def test_bad_record_size(self):
        with pytest.raises(D.DataFormatError):
            D.parse_cifar_batch(b"\x00" * 3072)


class TestAugment:
    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        images = rng.integers(0, 256, (6, 3, 32, 32)).astype(np.uint8)
        cfg = D.AugmentConfig(random_crop_pad=4, hflip=True)
        a = D.augment(images, cfg, rng_seed=42)
        b = D.augment(images, cfg, rng_seed=42)
        np.testing.assert_array_equal(a, b)
        c = D.augment(images, cfg, rng_seed=43)
        assert not np.array_equal(a, c)

    def test_shape_preserved(self):
        rng = np.random.default_rng(4)
        images = rng.integers(0, 256, (5, 3, 32, 32)).astype(np.uint8)
        out = D.augment(images, D.AugmentConfig(random_crop_pad=4, hflip=True), 0)
        assert out.shape == images.shape

    def test_disabled_is_identity(self):
        rng = np.random.default_rng(5)
        images = rng.integers(0, 256, (4, 1, 28, 28)).astype(np.uint8)
        out = D.augment(images, D.AugmentConfig(), 0)
        assert out is images  # byte-identical, no copy

    def test_mnist_recipe_is_identity(self):
        assert D.AugmentConfig.for_dataset("mnist") == D.AugmentConfig()
        cifar = D.AugmentConfig.for_dataset("cifar10")
        assert cifar.random_crop_pad == 4 and cifar.hflip


class TestBatches:
    def _tiny(self):
        images = np.arange(10, dtype=np.uint8).reshape(10, 1, 1, 1) * 20
        labels = np.arange(10, dtype=np.uint8) % 10
        return D.Dataset(kind="mnist", split="train", images=images, labels=labels)

    def test_batch_sizes_keep_short_final(self):
        ds = self._tiny()
        norm = D.Normalizer(np.zeros(1), np.ones(1))
        sizes = [len(b.labels) for b in D.batches(ds, 3, shuffle_seed=0, normalizer=norm)]
        assert sizes == [3, 3, 3, 1]

    def test_same_seed_same_permutation(self):
        ds = self._tiny()
        norm = D.Normalizer(np.zeros(1), np.ones(1))
        run1 = np.concatenate([b.labels for b in D.batches(ds, 4, 9, norm)])
        run2 = np.concatenate([b.labels for b in D.batches(ds, 4, 9, norm)])
        np.testing.assert_array_equal(run1, run2)

    def test_union_equals_dataset(self):
        ds = self._tiny()
        norm = D.Normalizer(np.zeros(1), np.ones(1))
        seen = np.concatenate([b.labels for b in D.batches(ds, 3, 11, norm)])
        np.testing.assert_array_equal(np.sort(seen), np.sort(ds.labels))

    def test_eval_order_is_sequential(self):
        ds = self._tiny()
        norm = D.Normalizer(np.zeros(1), np.ones(1))
        seen = np.concatenate([b.labels for b in D.batches(ds, 4, None, norm)])
        np.testing.assert_array_equal(seen, ds.labels)

    def test_epoch_bit_identical_across_runs(self, synth_mnist):
        train, _ = synth_mnist
        norm = D.Normalizer.fit(train)
        cfg = D.AugmentConfig(random_crop_pad=2, hflip=True)

        def epoch_bytes():
            h = hashlib.md5()
            for batch in D.batches(train, 128, shuffle_seed=3, normalizer=norm,
                                   augment_config=cfg, epoch=2):
                h.update(batch.images.tobytes())
                h.update(batch.labels.tobytes())
            return h.hexdigest()

        assert epoch_bytes() == epoch_bytes()

    def test_normalizer_fit_stats(self, synth_mnist):
        train, _ = synth_mnist
        norm = D.Normalizer.fit(train)
        batch = next(iter(D.batches(train, 512, None, norm)))
        assert abs(batch.images.mean()) < 0.2  # roughly centered


class TestRealCorpora:
    """These run only when the actual datasets are installed."""

    def test_mnist_train_counts(self):
        root = require_real("mnist")
        ds = D.load(D.DatasetSource(kind="mnist", root=root, split="train"))
        assert ds.images.shape == (60_000, 1, 28, 28)
        hist = np.bincount(ds.labels, minlength=10) / len(ds)
        assert np.all(np.abs(hist - 0.1) < 0.02)

    def test_cifar10_train_counts(self):
        root = require_real("cifar10")
        ds = D.load(D.DatasetSource(kind="cifar10", root=root, split="train"))
        assert ds.images.shape == (50_000, 3, 32, 32)
        hist = np.bincount(ds.labels, minlength=10) / len(ds)
        assert np.all(np.abs(hist - 0.1) < 0.02)
