"""Image datasets, task streams and the IDX file format.

A lifelong run consumes a stream of binary one-vs-rest tasks, one per
class, in ascending class order. Each task's training set pairs every
image of the task's class with an equal number of sampled images of
other classes; each task's binary test set is carved the same way out
of a fixed multiclass evaluation pool (the first ``test_count`` test
images). Pixel values arrive as uint8 and are scaled by 1/255 into
float64; the "variation" transform then adds unclipped unit Gaussian
noise per pixel.
"""

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
DATASET_MAGIC = b"PSSDAT1\0"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

DATA_DIR_ENV = "PSS_DATA_DIR"


class DataFormatError(ValueError):
    """A data file or dataset does not have the promised shape."""


@dataclass
class ImageDataset:
    """Flat float64 images in [0, 1] (before noise) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str
    noised: bool = False

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2:
            raise DataFormatError("images must be (n, pixels)")
        if self.labels.shape != (len(self.images),):
            raise DataFormatError("one label per image required")

    def __len__(self):
        return len(self.images)

    def subset(self, indices):
        return ImageDataset(self.images[indices], self.labels[indices],
                            self.name, self.noised)

    def checksum(self):
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


def _open_maybe_gzip(path):
    with open(path, "rb") as probe:
        head = probe.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n, what):
    blob = f.read(n)
    if len(blob) != n:
        raise DataFormatError(f"truncated IDX file while reading {what}")
    return blob


def load_idx(images_path, labels_path, name=None):
    """Load an IDX image/label file pair (plain or gzipped).

    Image files carry magic 2051 and three big-endian uint32 dims,
    label files magic 2049 and one. Pixels are scaled by 1/255.
    """
    with _open_maybe_gzip(images_path) as f:
        magic, n, rows, cols = struct.unpack(
            ">IIII", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(
                f"{images_path}: image magic {magic}, expected {IDX_IMAGES_MAGIC}")
        raw = _read_exact(f, n * rows * cols, f"{n} images")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
    with _open_maybe_gzip(labels_path) as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(
                f"{labels_path}: label magic {magic}, expected {IDX_LABELS_MAGIC}")
        labels = np.frombuffer(_read_exact(f, n_labels, f"{n_labels} labels"),
                               dtype=np.uint8)
    if n != n_labels:
        raise DataFormatError(
            f"image/label count mismatch: {n} images, {n_labels} labels")
    if name is None:
        name = os.path.basename(str(images_path))
    return ImageDataset(images / 255.0, labels.astype(np.int64), name)


def save_idx(images_path, labels_path, images_uint8, labels):
    """Write an IDX pair; inverse of ``load_idx`` up to the 1/255 scale.

    ``images_uint8`` is (n, rows, cols) or (n, pixels) with a square
    pixel count; values must already be uint8.
    """
    imgs = np.asarray(images_uint8)
    if imgs.dtype != np.uint8:
        raise DataFormatError("images must be uint8")
    if imgs.ndim == 2:
        side = int(round(imgs.shape[1] ** 0.5))
        if side * side != imgs.shape[1]:
            raise DataFormatError("flat images must have a square pixel count")
        imgs = imgs.reshape(len(imgs), side, side)
    n, rows, cols = imgs.shape
    lab = np.asarray(labels)
    if lab.shape != (n,):
        raise DataFormatError("one label per image required")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(imgs.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(lab.astype(np.uint8).tobytes())


def make_variation(dataset, seed):
    """Add unit Gaussian noise to every pixel; values are not clipped."""
    if dataset.noised:
        raise DataFormatError(f"{dataset.name} already carries variation noise")
    rng = np.random.default_rng(seed)
    noisy = dataset.images + rng.normal(0.0, 1.0, size=dataset.images.shape)
    return ImageDataset(noisy, dataset.labels.copy(),
                        f"{dataset.name}-variation", noised=True)


def synthetic_digits(n_train, n_test, seed, n_classes=10, pixels=784):
    """Stand-in corpus with the texture of scaled digit images.

    Each class gets a fixed random template in [0, 1]; samples are the
    template plus Gaussian jitter, clipped back into [0, 1]. Classes are
    exactly balanced (counts are rounded down to a multiple of
    ``n_classes``). Useful wherever real scans are unavailable but the
    pipeline and learning dynamics still need exercising.
    """
    ss = np.random.SeedSequence(seed)
    template_rng, train_rng, test_rng = [np.random.default_rng(c)
                                         for c in ss.spawn(3)]
    templates = template_rng.uniform(0.0, 1.0, size=(n_classes, pixels))

    def draw(count, rng, tag):
        per = count // n_classes
        xs, ys = [], []
        for c in range(n_classes):
            jitter = rng.normal(0.0, 0.3, size=(per, pixels))
            xs.append(np.clip(templates[c] + jitter, 0.0, 1.0))
            ys.append(np.full(per, c, dtype=np.int64))
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        order = rng.permutation(len(x))
        return ImageDataset(x[order], y[order], tag)

    return (draw(n_train, train_rng, "synthetic-train"),
            draw(n_test, test_rng, "synthetic-test"))


@dataclass
class TaskDataset:
    """Binary training or test set for one one-vs-rest task."""

    x: np.ndarray
    y: np.ndarray
    task: int
    positive_class: int

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        if self.x.ndim != 2 or self.y.shape != (len(self.x),):
            raise DataFormatError("task data must be (n, d) with n labels")
        if len(self.y) and not np.all((self.y == 0.0) | (self.y == 1.0)):
            raise DataFormatError("task labels must be 0 or 1")

    def __len__(self):
        return len(self.x)


@dataclass
class Task:
    index: int
    positive_class: int
    train: TaskDataset
    test: TaskDataset


@dataclass
class TaskStream:
    """Ordered binary tasks plus the shared multiclass evaluation pool."""

    tasks: list
    pool_x: np.ndarray
    pool_y: np.ndarray

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)


def _binary_set(images, labels, cls, rng, task, cap=None, ratio=1.0):
    pos = np.flatnonzero(labels == cls)
    neg = np.flatnonzero(labels != cls)
    if len(pos) == 0:
        raise DataFormatError(f"no examples of class {cls}")
    rng.shuffle(pos)
    if cap is not None:
        pos = pos[:max(1, min(len(pos), int(cap / (1.0 + ratio))))]
    n_neg = min(int(round(ratio * len(pos))), len(neg))
    if n_neg == 0:
        raise DataFormatError(
            f"class {cls}: no negative examples at ratio {ratio}")
    neg = rng.choice(neg, size=n_neg, replace=False)
    idx = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(len(pos)), np.zeros(n_neg)])
    order = rng.permutation(len(idx))
    return TaskDataset(images[idx[order]], y[order], task, cls)


def build_task_stream(train, test, n_tasks=10, seed=0, per_task_train=None,
                      test_count=2000, negative_ratio=1.0):
    """Cut two image datasets into an ordered one-vs-rest task stream.

    Task ``t`` is "class ``t`` against the rest": its training
    positives are every class-``t`` training image (shuffled, then
    capped so positives + negatives stay within ``per_task_train`` when
    a cap is given) and its negatives ``negative_ratio`` times as many
    images sampled from the other classes. Binary test sets are always
    balanced and come from the multiclass pool, which is the first
    ``test_count`` images of ``test``. All sampling comes from one seed
    and is reproducible byte for byte.
    """
    if n_tasks < 1:
        raise DataFormatError("need at least one task")
    if negative_ratio <= 0:
        raise DataFormatError("negative_ratio must be positive")
    present = set(np.unique(train.labels).tolist())
    missing = [c for c in range(n_tasks) if c not in present]
    if missing:
        raise DataFormatError(f"training data lacks classes {missing}")
    pool = test.subset(np.arange(min(test_count, len(test))))
    ss = np.random.SeedSequence(seed)
    tasks = []
    for t, child in enumerate(ss.spawn(n_tasks)):
        rng = np.random.default_rng(child)
        tr = _binary_set(train.images, train.labels, t, rng, t,
                         cap=per_task_train, ratio=negative_ratio)
        te = _binary_set(pool.images, pool.labels, t, rng, t)
        tasks.append(Task(index=t, positive_class=t, train=tr, test=te))
    return TaskStream(tasks=tasks, pool_x=pool.images, pool_y=pool.labels)


def save_dataset(path, dataset):
    """Cache a dataset as a binary container."""
    write_container(path, DATASET_MAGIC,
                    {"name": dataset.name, "noised": dataset.noised,
                     "checksum": dataset.checksum()},
                    {"images": dataset.images, "labels": dataset.labels})


def load_dataset(path):
    meta, arrays = read_container(path, DATASET_MAGIC)
    ds = ImageDataset(arrays["images"], arrays["labels"],
                      meta["name"], meta["noised"])
    if ds.checksum() != meta["checksum"]:
        raise DataFormatError(f"{path}: dataset bytes do not match stored checksum")
    return ds


def find_mnist(data_dir=None):
    """Locate the four canonical IDX files, gzipped or plain.

    Looks in ``data_dir``, else in ``$PSS_DATA_DIR``. Returns a dict of
    paths or None when any file is missing.
    """
    root = data_dir or os.environ.get(DATA_DIR_ENV)
    if not root:
        return None
    found = {}
    for key, base in MNIST_FILES.items():
        for candidate in (os.path.join(root, base),
                          os.path.join(root, base + ".gz")):
            if os.path.exists(candidate):
                found[key] = candidate
                break
        else:
            return None
    return found


def load_mnist(data_dir=None):
    paths = find_mnist(data_dir)
    if paths is None:
        root = data_dir or os.environ.get(DATA_DIR_ENV) or "(unset)"
        raise DataFormatError(
            f"IDX files not found under {root}; set {DATA_DIR_ENV} or pass a directory")
    train = load_idx(paths["train_images"], paths["train_labels"], "mnist-train")
    test = load_idx(paths["test_images"], paths["test_labels"], "mnist-test")
    return train, test
