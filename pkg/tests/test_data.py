"""Unit tests for IDX parsing, noise variation and task streams."""

import gzip

import numpy as np
import pytest

from pss.container import ContainerError, read_container, write_container
from pss.data import (
    DataFormatError,
    ImageDataset,
    build_task_stream,
    find_mnist,
    load_dataset,
    load_idx,
    make_variation,
    save_dataset,
    save_idx,
    synthetic_digits,
)


def random_idx_pair(tmp_path, n=60, side=28, seed=0, gzipped=False):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, side, side), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    ipath = tmp_path / "images-idx3-ubyte"
    lpath = tmp_path / "labels-idx1-ubyte"
    save_idx(ipath, lpath, images, labels)
    if gzipped:
        for p in (ipath, lpath):
            gz = p.with_suffix(p.suffix + ".gz")
            gz.write_bytes(gzip.compress(p.read_bytes()))
            p.unlink()
        ipath = ipath.with_suffix(ipath.suffix + ".gz")
        lpath = lpath.with_suffix(lpath.suffix + ".gz")
    return ipath, lpath, images, labels


class TestIdxRoundTrip:
    def test_plain_files(self, tmp_path):
        ipath, lpath, images, labels = random_idx_pair(tmp_path)
        ds = load_idx(ipath, lpath)
        assert ds.images.shape == (60, 784)
        np.testing.assert_array_equal(ds.images,
                                      images.reshape(60, 784) / 255.0)
        np.testing.assert_array_equal(ds.labels, labels)

    def test_gzipped_files(self, tmp_path):
        ipath, lpath, images, labels = random_idx_pair(tmp_path, gzipped=True)
        ds = load_idx(ipath, lpath)
        np.testing.assert_array_equal(ds.images,
                                      images.reshape(60, 784) / 255.0)
        np.testing.assert_array_equal(ds.labels, labels)

    def test_bad_magic_rejected(self, tmp_path):
        ipath, lpath, _, _ = random_idx_pair(tmp_path)
        blob = bytearray(ipath.read_bytes())
        blob[3] = 99
        ipath.write_bytes(bytes(blob))
        with pytest.raises(DataFormatError, match="magic"):
            load_idx(ipath, lpath)

    def test_truncated_file_rejected(self, tmp_path):
        ipath, lpath, _, _ = random_idx_pair(tmp_path)
        ipath.write_bytes(ipath.read_bytes()[:100])
        with pytest.raises(DataFormatError, match="truncated"):
            load_idx(ipath, lpath)

    def test_count_mismatch_rejected(self, tmp_path):
        ipath, lpath, _, labels = random_idx_pair(tmp_path)
        other_l = tmp_path / "short-labels-idx1-ubyte"
        save_idx(tmp_path / "short-images-idx3-ubyte", other_l,
                 np.zeros((10, 28, 28), dtype=np.uint8), labels[:10])
        with pytest.raises(DataFormatError, match="mismatch"):
            load_idx(ipath, other_l)

    def test_save_rejects_non_uint8(self, tmp_path):
        with pytest.raises(DataFormatError):
            save_idx(tmp_path / "i", tmp_path / "l",
                     np.zeros((3, 4, 4)), np.zeros(3, dtype=np.uint8))


class TestVariation:
    def test_noise_statistics(self):
        rng = np.random.default_rng(5)
        base = ImageDataset(rng.random((200, 784)),
                            rng.integers(0, 10, 200), "base")
        noisy = make_variation(base, seed=11)
        delta = noisy.images - base.images
        assert abs(delta.mean()) < 0.01
        assert abs(delta.std() - 1.0) < 0.01
        assert noisy.noised and noisy.name == "base-variation"
        # unclipped: noise pushes pixels outside [0, 1]
        assert noisy.images.min() < 0.0 and noisy.images.max() > 1.0

    def test_same_seed_same_bytes(self):
        base = ImageDataset(np.zeros((5, 16)), np.zeros(5, dtype=int), "b")
        a = make_variation(base, seed=3)
        b = make_variation(base, seed=3)
        c = make_variation(base, seed=4)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.images.tobytes() != c.images.tobytes()

    def test_double_noising_rejected(self):
        base = ImageDataset(np.zeros((2, 4)), np.zeros(2, dtype=int), "b")
        with pytest.raises(DataFormatError):
            make_variation(make_variation(base, 0), 1)


class TestSyntheticDigits:
    def test_shapes_balance_and_range(self):
        train, test = synthetic_digits(200, 50, seed=9)
        assert train.images.shape == (200, 784)
        assert test.images.shape == (50, 784)
        counts = np.bincount(train.labels, minlength=10)
        assert np.all(counts == 20)
        assert train.images.min() >= 0.0 and train.images.max() <= 1.0

    def test_deterministic(self):
        a, _ = synthetic_digits(100, 20, seed=2)
        b, _ = synthetic_digits(100, 20, seed=2)
        c, _ = synthetic_digits(100, 20, seed=3)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.images.tobytes() != c.images.tobytes()

    def test_classes_are_learnably_distinct(self):
        train, _ = synthetic_digits(400, 0, seed=1)
        mean0 = train.images[train.labels == 0].mean(axis=0)
        mean1 = train.images[train.labels == 1].mean(axis=0)
        assert np.linalg.norm(mean0 - mean1) > 1.0


class TestTaskStream:
    def make_stream(self, seed=0, **kw):
        train, test = synthetic_digits(600, 300, seed=4)
        return build_task_stream(train, test, n_tasks=10, seed=seed, **kw)

    def test_ordering_and_balance(self):
        stream = self.make_stream()
        assert len(stream) == 10
        for t, task in enumerate(stream):
            assert task.index == t and task.positive_class == t
            assert task.train.y.sum() * 2 == len(task.train.y)
            assert task.test.y.sum() * 2 == len(task.test.y)

    def test_positives_really_are_the_class(self):
        train, test = synthetic_digits(600, 300, seed=4)
        stream = build_task_stream(train, test, n_tasks=10, seed=1)
        task = stream.tasks[3]
        pos_rows = task.train.x[task.train.y == 1.0]
        # every positive row appears among the class-3 training images
        class3 = train.images[train.labels == 3]
        for row in pos_rows[:5]:
            assert any(np.array_equal(row, img) for img in class3)

    def test_train_cap_applies(self):
        stream = self.make_stream(per_task_train=40)
        for task in stream:
            assert len(task.train) <= 40

    def test_pool_is_test_prefix(self):
        train, test = synthetic_digits(600, 300, seed=4)
        stream = build_task_stream(train, test, n_tasks=10, seed=0,
                                   test_count=100)
        assert stream.pool_x.shape == (100, 784)
        np.testing.assert_array_equal(stream.pool_x, test.images[:100])
        np.testing.assert_array_equal(stream.pool_y, test.labels[:100])

    def test_deterministic_stream(self):
        a = self.make_stream(seed=7)
        b = self.make_stream(seed=7)
        c = self.make_stream(seed=8)
        for ta, tb in zip(a, b):
            assert ta.train.x.tobytes() == tb.train.x.tobytes()
            assert ta.train.y.tobytes() == tb.train.y.tobytes()
        assert a.tasks[0].train.x.tobytes() != c.tasks[0].train.x.tobytes()

    def test_missing_class_rejected(self):
        train, test = synthetic_digits(60, 30, seed=4)
        train.labels[train.labels == 9] = 0
        with pytest.raises(DataFormatError, match="classes"):
            build_task_stream(train, test, n_tasks=10, seed=0)

    def test_negative_ratio_scales_training_negatives(self):
        doubled = self.make_stream(negative_ratio=2.0)
        for task in doubled:
            n_pos = int(task.train.y.sum())
            assert len(task.train.y) - n_pos == 2 * n_pos
            # test sets stay balanced regardless of the training ratio
            assert task.test.y.sum() * 2 == len(task.test.y)

    def test_negative_ratio_default_is_bitwise_identical(self):
        implicit = self.make_stream(seed=3)
        explicit = self.make_stream(seed=3, negative_ratio=1.0)
        for ta, tb in zip(implicit, explicit):
            assert ta.train.x.tobytes() == tb.train.x.tobytes()
            assert ta.train.y.tobytes() == tb.train.y.tobytes()

    def test_nonpositive_negative_ratio_rejected(self):
        with pytest.raises(DataFormatError, match="negative_ratio"):
            self.make_stream(negative_ratio=0.0)


class TestDatasetCache:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = ImageDataset(rng.random((20, 49)), rng.integers(0, 10, 20), "tiny")
        path = tmp_path / "tiny.pssdat"
        save_dataset(path, ds)
        back = load_dataset(path)
        assert back.images.tobytes() == ds.images.tobytes()
        assert back.labels.tobytes() == ds.labels.tobytes()
        assert back.name == "tiny" and back.noised is False

    def test_corruption_detected(self, tmp_path):
        ds = ImageDataset(np.ones((4, 9)), np.zeros(4, dtype=int), "x")
        path = tmp_path / "x.pssdat"
        save_dataset(path, ds)
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(DataFormatError, match="checksum"):
            load_dataset(path)


class TestContainer:
    def test_arrays_and_meta_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        arrays = {"a": rng.random((3, 4)),
                  "b": rng.integers(0, 9, size=7),
                  "c": rng.integers(0, 255, size=(2, 2), dtype=np.uint8)}
        path = tmp_path / "box.bin"
        write_container(path, b"TESTBOX\0", {"k": [1, 2]}, arrays)
        meta, back = read_container(path, b"TESTBOX\0")
        assert meta == {"k": [1, 2]}
        for name, arr in arrays.items():
            assert back[name].dtype == arr.dtype
            assert back[name].tobytes() == np.ascontiguousarray(arr).tobytes()

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "box.bin"
        write_container(path, b"TESTBOX\0", {}, {})
        with pytest.raises(ContainerError, match="magic"):
            read_container(path, b"OTHERBX\0")

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "box.bin"
        write_container(path, b"TESTBOX\0", {}, {"a": np.ones((100, 100))})
        path.write_bytes(path.read_bytes()[:-50])
        with pytest.raises(ContainerError, match="truncated"):
            read_container(path, b"TESTBOX\0")

    def test_object_dtype_rejected(self, tmp_path):
        with pytest.raises(ContainerError, match="dtype"):
            write_container(tmp_path / "box.bin", b"TESTBOX\0", {},
                            {"a": np.array(["strings"], dtype=object)})


class TestFindMnist:
    def test_unset_returns_none(self, monkeypatch):
        monkeypatch.delenv("PSS_DATA_DIR", raising=False)
        assert find_mnist() is None

    def test_finds_gzipped_set(self, tmp_path, monkeypatch):
        for base in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                     "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"):
            (tmp_path / (base + ".gz")).write_bytes(b"\x1f\x8b")
        monkeypatch.setenv("PSS_DATA_DIR", str(tmp_path))
        paths = find_mnist()
        assert paths is not None
        assert all(p.endswith(".gz") for p in paths.values())

    def test_partial_set_returns_none(self, tmp_path):
        (tmp_path / "train-images-idx3-ubyte").write_bytes(b"")
        assert find_mnist(str(tmp_path)) is None
