"""Tests for IDX file IO and the synthetic digit corpus."""

import struct

import numpy as np
import pytest

from bsl.data import (
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    TEST_LABELS,
    TRAIN_IMAGES,
    ensure_dataset,
    generate_corpus,
    load_dataset,
    load_idx_images,
    load_idx_labels,
    render_digit,
    save_idx_images,
    save_idx_labels,
)
from bsl.errors import DataError


class TestIdxIo:
    def test_image_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, (5, 28, 28)).astype(np.uint8)
        path = tmp_path / "imgs"
        save_idx_images(path, imgs)
        assert np.array_equal(load_idx_images(path), imgs)

    def test_label_round_trip(self, tmp_path):
        labels = np.arange(10, dtype=np.uint8)
        path = tmp_path / "labels"
        save_idx_labels(path, labels)
        assert np.array_equal(load_idx_labels(path), labels)

    def test_header_layout_is_big_endian(self, tmp_path):
        path = tmp_path / "imgs"
        save_idx_images(path, np.zeros((2, 3, 4), dtype=np.uint8))
        head = path.read_bytes()[:16]
        assert struct.unpack(">IIII", head) == (IDX_IMAGES_MAGIC, 2, 3, 4)

    def test_bad_image_magic(self, tmp_path):
        path = tmp_path / "imgs"
        path.write_bytes(struct.pack(">IIII", IDX_LABELS_MAGIC, 1, 2, 2) + bytes(4))
        with pytest.raises(DataError, match="magic"):
            load_idx_images(path)

    def test_bad_label_magic(self, tmp_path):
        path = tmp_path / "labels"
        path.write_bytes(struct.pack(">II", IDX_IMAGES_MAGIC, 1) + bytes(1))
        with pytest.raises(DataError, match="magic"):
            load_idx_labels(path)

    def test_truncated_files(self, tmp_path):
        path = tmp_path / "short"
        path.write_bytes(b"\x00\x00")
        with pytest.raises(DataError, match="truncated"):
            load_idx_images(path)
        with pytest.raises(DataError, match="truncated"):
            load_idx_labels(path)

    def test_body_length_mismatch(self, tmp_path):
        path = tmp_path / "imgs"
        path.write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, 2, 2, 2) + bytes(7))
        with pytest.raises(DataError, match="expected"):
            load_idx_images(path)


class TestRenderDigit:
    def test_shape_and_dtype(self):
        img = render_digit(np.random.default_rng(1), 7)
        assert img.shape == (28, 28) and img.dtype == np.uint8

    def test_has_ink(self):
        for label in range(10):
            img = render_digit(np.random.default_rng(label), label)
            assert img.max() > 100
            assert np.mean(img > 0) > 0.02

    def test_varies_with_rng(self):
        a = render_digit(np.random.default_rng(2), 3)
        b = render_digit(np.random.default_rng(3), 3)
        assert not np.array_equal(a, b)


class TestGenerateCorpus:
    def test_deterministic(self):
        xa, ya = generate_corpus(50, seed=9)
        xb, yb = generate_corpus(50, seed=9)
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)

    def test_seed_changes_output(self):
        xa, _ = generate_corpus(20, seed=1)
        xb, _ = generate_corpus(20, seed=2)
        assert not np.array_equal(xa, xb)

    def test_balanced_labels(self):
        _, y = generate_corpus(100, seed=4)
        counts = np.bincount(y, minlength=10)
        assert np.all(counts == 10)


class TestDatasetLifecycle:
    def test_ensure_then_load(self, tmp_path):
        d = ensure_dataset(tmp_path, n_train=30, n_test=10, seed=5)
        ds = load_dataset(d)
        assert ds["x_train"].shape == (30, 1, 28, 28)
        assert ds["x_test"].shape == (10, 1, 28, 28)
        assert ds["x_train"].dtype == np.float32
        assert 0.0 <= ds["x_train"].min() and ds["x_train"].max() <= 1.0
        assert ds["y_train"].dtype == np.uint8
        assert ds["info"]["train"] == 30 and ds["info"]["test"] == 10

    def test_idempotent(self, tmp_path):
        d = ensure_dataset(tmp_path, n_train=12, n_test=4, seed=6)
        before = (d / TRAIN_IMAGES).read_bytes()
        ensure_dataset(tmp_path, n_train=12, n_test=4, seed=6)
        assert (d / TRAIN_IMAGES).read_bytes() == before

    def test_missing_file(self, tmp_path):
        d = ensure_dataset(tmp_path, n_train=12, n_test=4, seed=7)
        (d / TEST_LABELS).unlink()
        with pytest.raises(DataError, match="missing"):
            load_dataset(d)

    def test_count_mismatch(self, tmp_path):
        d = ensure_dataset(tmp_path, n_train=12, n_test=4, seed=8)
        save_idx_labels(d / TEST_LABELS, np.zeros(3, dtype=np.uint8))
        with pytest.raises(DataError, match="labels"):
            load_dataset(d)

    def test_label_out_of_range(self, tmp_path):
        d = ensure_dataset(tmp_path, n_train=12, n_test=4, seed=9)
        save_idx_labels(d / TEST_LABELS, np.full(4, 11, dtype=np.uint8))
        with pytest.raises(DataError, match="range"):
            load_dataset(d)
