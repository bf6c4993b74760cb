"""MNIST ingestion and task-sequence construction (permuted / split / synthetic)."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .nn import Array

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

SPLIT_PAIRS = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]


class IdxError(ValueError):
    """Base error for malformed IDX containers."""


class IdxMagicError(IdxError):
    """File does not start with the expected IDX magic number."""


class IdxCountError(IdxError):
    """Item counts disagree (truncated payload or images/labels mismatch)."""


@dataclass
class LabeledSet:
    """Flat dataset: inputs in [0,1], integer labels, fixed class count."""
    inputs: Array           # [N, D] float64
    labels: np.ndarray      # [N] int64
    num_classes: int

    def __post_init__(self) -> None:
        if len(self.inputs) == 0:
            raise ValueError("empty dataset")
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs vs {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels outside [0,{self.num_classes})")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx: np.ndarray) -> "LabeledSet":
        return LabeledSet(self.inputs[idx], self.labels[idx], self.num_classes)


@dataclass
class Task:
    train: LabeledSet
    val: LabeledSet
    test: LabeledSet
    # original labels behind each local class, e.g. (4, 5) for the third
    # split task; None when the task keeps the source label space
    label_map: tuple[int, ...] | None = None


@dataclass
class TaskSequence:
    tasks: list[Task]
    kind: str  # "permuted" | "split" | "synthetic"

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self) -> Iterator[Task]:
        return iter(self.tasks)

    def __getitem__(self, i: int) -> Task:
        return self.tasks[i]


def _open_maybe_gzip(path):
    p = Path(path)
    if p.suffix == ".gz":
        return gzip.open(p, "rb")
    return open(p, "rb")


def _read_idx(path, expect_magic: int) -> tuple[int, np.ndarray]:
    with _open_maybe_gzip(path) as f:
        header = f.read(4)
        if len(header) < 4:
            raise IdxMagicError(f"{path}: file too short for an IDX header")
        (magic,) = struct.unpack(">I", header)
        if magic != expect_magic:
            raise IdxMagicError(f"{path}: magic {magic}, expected {expect_magic}")
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        payload = f.read()
    expected = int(np.prod(dims))
    if len(payload) != expected:
        raise IdxCountError(f"{path}: header promises {expected} bytes, found {len(payload)}")
    return dims[0], np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> LabeledSet:
    """Load an MNIST-style IDX image/label pair (plain or .gz) as a LabeledSet.

    Pixels are scaled to [0,1] (byte / 255). Raises FileNotFoundError for a
    missing file, IdxMagicError for a wrong magic number and IdxCountError
    when the two files disagree on the item count.
    """
    for p in (images_path, labels_path):
        if not Path(p).exists():
            raise FileNotFoundError(f"dataset file not found: {p}")
    n_images, images = _read_idx(images_path, IMAGE_MAGIC)
    n_labels, labels = _read_idx(labels_path, LABEL_MAGIC)
    if n_images != n_labels:
        raise IdxCountError(f"{n_images} images vs {n_labels} labels")
    inputs = images.reshape(n_images, -1).astype(np.float64) / 255.0
    return LabeledSet(inputs, labels.astype(np.int64), num_classes=10)


MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def resolve_mnist_paths(data_dir) -> dict[str, Path]:
    """Locate the four MNIST files under data_dir, accepting .gz variants."""
    data_dir = Path(data_dir)
    out = {}
    for key, stem in MNIST_FILES.items():
        plain, gz = data_dir / stem, data_dir / (stem + ".gz")
        if plain.exists():
            out[key] = plain
        elif gz.exists():
            out[key] = gz
        else:
            raise FileNotFoundError(f"missing {stem}[.gz] under {data_dir}")
    return out


def load_mnist(data_dir) -> tuple[LabeledSet, LabeledSet]:
    paths = resolve_mnist_paths(data_dir)
    train = load_mnist_idx(paths["train_images"], paths["train_labels"])
    test = load_mnist_idx(paths["test_images"], paths["test_labels"])
    return train, test


def _train_val_split(data: LabeledSet, rng: np.random.Generator,
                     val_fraction: float = 0.1) -> tuple[LabeledSet, LabeledSet]:
    # seeded shuffle then slice; 90/10 by default
    order = rng.permutation(len(data))
    n_val = max(1, int(round(len(data) * val_fraction)))
    return data.subset(order[n_val:]), data.subset(order[:n_val])


def make_permuted_tasks(base: LabeledSet, test: LabeledSet,
                        num_tasks: int, seed: int) -> TaskSequence:
    """Pixel-permutation tasks. Task 0 is the untouched dataset; the rest get
    independent uniform pixel permutations, the same one applied to that
    task's train/val/test."""
    if num_tasks < 1:
        raise ValueError(f"num_tasks must be >= 1, got {num_tasks}")
    rng = np.random.default_rng(seed)
    dim = base.input_dim
    tasks = []
    for t in range(num_tasks):
        perm = np.arange(dim) if t == 0 else rng.permutation(dim)
        tr = LabeledSet(base.inputs[:, perm], base.labels, base.num_classes)
        te = LabeledSet(test.inputs[:, perm], test.labels, test.num_classes)
        train, val = _train_val_split(tr, rng)
        tasks.append(Task(train, val, te))
    return TaskSequence(tasks, kind="permuted")


def make_split_tasks(base: LabeledSet, test: LabeledSet, seed: int = 0) -> TaskSequence:
    """Digit-pair tasks (0,1),(2,3),...,(8,9) with labels remapped to {0,1}."""
    if base.num_classes != 10:
        raise ValueError("split tasks expect the 10-class source dataset")
    rng = np.random.default_rng(seed)
    tasks = []
    for lo, hi in SPLIT_PAIRS:
        def pick(ds: LabeledSet) -> LabeledSet:
            mask = (ds.labels == lo) | (ds.labels == hi)
            labels = (ds.labels[mask] == hi).astype(np.int64)
            return LabeledSet(ds.inputs[mask], labels, num_classes=2)
        train, val = _train_val_split(pick(base), rng)
        tasks.append(Task(train, val, pick(test), label_map=(lo, hi)))
    return TaskSequence(tasks, kind="split")


def make_synthetic(num_tasks: int, samples_per_task: int, input_dim: int,
                   classes: int, seed: int) -> TaskSequence:
    """Tiny Gaussian-blob tasks for fast tests.

    Class blobs are well separated; each task rotates the input axes by a
    fresh random orthogonal matrix, then everything is squeezed back into
    [0,1]. Deterministic given the seed.
    """
    if min(num_tasks, samples_per_task, input_dim, classes) <= 0:
        raise ValueError("all synthetic dataset sizes must be positive")
    if classes > input_dim:
        raise ValueError("need classes <= input_dim for orthogonal class centers")
    rng = np.random.default_rng(seed)
    # orthonormal class centers scaled well past the noise radius, so the
    # blobs stay cleanly separable in every rotation
    basis, _ = np.linalg.qr(rng.standard_normal((input_dim, input_dim)))
    centers = 1.5 * basis[:classes]
    tasks = []
    n_test = max(classes, samples_per_task // 5)
    for _ in range(num_tasks):
        q, _ = np.linalg.qr(rng.standard_normal((input_dim, input_dim)))

        def draw(n: int) -> LabeledSet:
            labels = rng.integers(0, classes, size=n)
            x = centers[labels] + 0.1 * rng.standard_normal((n, input_dim))
            x = x @ q
            # affine squash into [0,1]; blob geometry is preserved
            x = np.clip(0.5 + 0.25 * x, 0.0, 1.0)
            return LabeledSet(x, labels.astype(np.int64), classes)

        train, val = _train_val_split(draw(samples_per_task), rng)
        tasks.append(Task(train, val, draw(n_test)))
    return TaskSequence(tasks, kind="synthetic")


def batch_iter(data: LabeledSet, batch_size: int,
               shuffle_seed: int) -> Iterator[tuple[Array, np.ndarray]]:
    """Epoch-shuffled minibatches; the final short batch is included."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(shuffle_seed).permutation(len(data))
    for start in range(0, len(data), batch_size):
        idx = order[start:start + batch_size]
        yield data.inputs[idx], data.labels[idx]
