"""IDX image datasets, class splits and seeded mini-batches."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .rng import make_rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_CLASSES = [str(d) for d in range(10)]
FMNIST_CLASSES = [
    "t-shirt", "trouser", "pullover", "dress", "coat",
    "sandal", "shirt", "sneaker", "bag", "ankle-boot",
]
# FMNIST classes 0-5 keep their labels; MNIST digits 4-9 become 6-11.
COMBINED_FMNIST_CLASSES = (0, 1, 2, 3, 4, 5)
COMBINED_MNIST_CLASSES = (4, 5, 6, 7, 8, 9)

MNIST_PAIR_SPLIT = [[0, 7], [1, 9], [2, 4], [3, 8], [5, 6]]


class IdxFormatError(ValueError):
    """Malformed IDX file: bad magic, truncated payload or inconsistent counts."""


class EmptyDatasetError(ValueError):
    pass


class CapacityError(ValueError):
    """More samples were requested than a class can supply."""


@dataclass
class Dataset:
    """Images (N x 1 x H x W floats in [0, 1]) with integer labels in [0, K)."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) == 0:
            raise EmptyDatasetError("dataset has no samples")
        if not self.class_names:
            self.class_names = [str(k) for k in range(int(self.labels.max()) + 1)]
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], list(self.class_names))


# -- IDX reading / writing -------------------------------------------------
def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int | None = None) -> np.ndarray:
    """Decode an unsigned-byte IDX payload into a uint8 array."""
    if len(raw) < 4:
        raise IdxFormatError(f"file too short for an IDX header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(
            f"bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    if magic >> 8 != 0x08:
        raise IdxFormatError(f"unsupported IDX element type in magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"truncated header: need {header} bytes, have {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims)) if dims else 0
    if len(raw) - header < need:
        raise IdxFormatError(
            f"truncated payload: dims {dims} need {need} bytes, have {len(raw) - header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise TypeError("only uint8 payloads are supported")
    magic = 0x0800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def load_idx(images_path, labels_path, class_names: Sequence[str] | None = None) -> Dataset:
    images = parse_idx(_read_bytes(images_path), IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    pixels = images.astype(np.float64)[:, None, :, :] / 255.0
    names = list(class_names) if class_names else None
    if names is None:
        names = [str(k) for k in range(int(labels.max()) + 1)] if labels.size else []
    return Dataset(pixels, labels.astype(np.int64), names)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset back to IDX (pixels quantised to bytes)."""
    if ds.images.shape[1] != 1:
        raise ValueError("only single-channel datasets can be written as IDX")
    pixels = np.rint(ds.images[:, 0] * 255.0).clip(0, 255).astype(np.uint8)
    Path(images_path).write_bytes(encode_idx(pixels))
    Path(labels_path).write_bytes(encode_idx(ds.labels.astype(np.uint8)))


_IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(root: Path, stem: str) -> Path:
    dotted = stem.replace("-idx", ".idx")
    for name in (stem, dotted):
        for suffix in ("", ".gz"):
            p = root / (name + suffix)
            if p.exists():
                return p
    raise FileNotFoundError(f"no {stem}[.gz] under {root}")


def load_standard(root, split: str = "train", class_names: Sequence[str] | None = None) -> Dataset:
    """Load the train or t10k pair from a directory using the usual file names."""
    root = Path(root)
    img, lab = _IDX_NAMES[split]
    return load_idx(_find(root, img), _find(root, lab), class_names)


def default_data_dir() -> Path:
    return Path(os.environ.get("MOE_LAB_DATA_DIR", "data"))


# -- sampling ---------------------------------------------------------------
def balanced_counts(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Split ``n`` into per-class counts differing by at most one."""
    base, extra = divmod(n, n_classes)
    counts = np.full(n_classes, base, dtype=np.int64)
    counts[rng.permutation(n_classes)[:extra]] += 1
    return counts


def balanced_sample(ds: Dataset, n: int, rng: np.random.Generator,
                    exclude: np.ndarray | None = None) -> np.ndarray:
    """Indices of a class-balanced draw of ``n`` samples without replacement."""
    classes = np.flatnonzero(ds.class_counts() > 0)
    counts = balanced_counts(n, len(classes), rng)
    taken = []
    for cls, want in zip(classes, counts):
        pool = np.flatnonzero(ds.labels == cls)
        if exclude is not None:
            pool = np.setdiff1d(pool, exclude, assume_unique=True)
        if want > len(pool):
            raise CapacityError(
                f"class {ds.class_names[cls]!r} has {len(pool)} samples, {want} requested"
            )
        taken.append(rng.choice(pool, size=want, replace=False))
    idx = np.concatenate(taken)
    return idx[rng.permutation(len(idx))]


def subsample(ds: Dataset, n: int, seed: int, balanced: bool = True) -> Dataset:
    if n > len(ds):
        raise CapacityError(f"requested {n} samples from a dataset of {len(ds)}")
    rng = make_rng(seed, "subsample")
    if balanced:
        return ds.subset(balanced_sample(ds, n, rng))
    return ds.subset(rng.choice(len(ds), size=n, replace=False))


def _relabel(ds: Dataset, keep: Sequence[int], offset: int) -> tuple[np.ndarray, np.ndarray]:
    mask = np.isin(ds.labels, keep)
    mapping = np.full(ds.n_classes, -1, dtype=np.int64)
    mapping[list(keep)] = np.arange(len(keep)) + offset
    return ds.images[mask], mapping[ds.labels[mask]]


def _combined_pool(fmnist: Dataset, mnist: Dataset) -> Dataset:
    fi, fl = _relabel(fmnist, COMBINED_FMNIST_CLASSES, 0)
    mi, ml = _relabel(mnist, COMBINED_MNIST_CLASSES, len(COMBINED_FMNIST_CLASSES))
    names = [FMNIST_CLASSES[c] for c in COMBINED_FMNIST_CLASSES] + [
        MNIST_CLASSES[c] for c in COMBINED_MNIST_CLASSES
    ]
    return Dataset(np.concatenate([fi, mi]), np.concatenate([fl, ml]), names)


def combine_fmnist_mnist(fmnist: Dataset, mnist: Dataset, train_n: int, test_n: int,
                         seed: int, fmnist_test: Dataset | None = None,
                         mnist_test: Dataset | None = None) -> tuple[Dataset, Dataset]:
    """Build the 12-class FMNIST(0-5) + MNIST(4-9) dataset.

    Train samples come from ``fmnist``/``mnist``. Test samples come from
    ``fmnist_test``/``mnist_test`` when both are given, otherwise from the
    same pools, disjoint from the train draw. Both draws are class-balanced
    to within one sample.
    """
    pool = _combined_pool(fmnist, mnist)
    rng = make_rng(seed, "combine")
    train_idx = balanced_sample(pool, train_n, rng)
    if fmnist_test is not None and mnist_test is not None:
        test_pool = _combined_pool(fmnist_test, mnist_test)
        test_idx = balanced_sample(test_pool, test_n, rng)
    else:
        test_pool = pool
        test_idx = balanced_sample(pool, test_n, rng, exclude=np.sort(train_idx))
    return pool.subset(train_idx), test_pool.subset(test_idx)


@dataclass(frozen=True)
class ClassSplit:
    """Disjoint, non-empty groups of class labels (one group per expert)."""

    groups: tuple[tuple[int, ...], ...]

    def __init__(self, groups: Sequence[Sequence[int]]):
        groups = tuple(tuple(int(c) for c in g) for g in groups)
        flat = [c for g in groups for c in g]
        if any(len(g) == 0 for g in groups):
            raise ValueError("class split contains an empty group")
        if len(flat) != len(set(flat)):
            raise ValueError(f"class split groups overlap: {groups}")
        object.__setattr__(self, "groups", groups)

    def __len__(self) -> int:
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    def __getitem__(self, i):
        return self.groups[i]

    def owner(self) -> dict[int, int]:
        """Map class label -> index of the group containing it."""
        return {c: i for i, g in enumerate(self.groups) for c in g}


def filter_by_group(ds: Dataset, group: Sequence[int]) -> Dataset:
    """Samples whose label is in ``group``; labels are kept as they are."""
    if len(group) == 0:
        raise ValueError("group must not be empty")
    mask = np.isin(ds.labels, list(group))
    if not mask.any():
        raise EmptyDatasetError(f"no samples with labels in {list(group)}")
    return ds.subset(np.flatnonzero(mask))


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled mini-batches; the order depends only on (seed, epoch).

    The final batch may be shorter than ``batch_size``.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = make_rng(seed, "batches", epoch).permutation(len(ds))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]
