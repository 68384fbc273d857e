"""Benchmark streams: IDX file parsing, class-incremental splits, synthetic data.

A stream is an ordered list of experiences; each experience carries disjoint
train / validation / test datasets restricted to its own classes. Test data
always comes from a designated test source (the test IDX files, or a separate
synthetic draw), never from the training pool.

IDX wire format (big-endian throughout):
    bytes 0-1   0x00 0x00
    byte  2     dtype code, only 0x08 (unsigned byte) is accepted
    byte  3     number of dimensions: 3 for images (N, rows, cols), 1 for labels
    next 4*ndim u32 dimension sizes
    rest        payload, one byte per element, row-major
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IdxParseError, UsageError

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass
class SeededRng:
    """A named, reproducible random generator.

    The entropy is the (seed, *tags) tuple, so derived streams (batch order,
    buffer slots, splits) are independent and stable under the same root seed.
    """

    seed: int
    tags: tuple[int, ...] = ()
    algorithm: str = "PCG64"

    def __post_init__(self):
        bitgen = np.random.PCG64(np.random.SeedSequence((self.seed,) + self.tags))
        self.gen = np.random.Generator(bitgen)

    def child(self, tag: int) -> "SeededRng":
        return SeededRng(self.seed, self.tags + (tag,))


@dataclass
class LabeledDataset:
    inputs: np.ndarray        # (N, D) float64 in [0, 1]
    labels: np.ndarray        # (N,) int64
    n_classes: int
    role: str = "train"       # provenance: train | val | test

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.ndim != 2:
            raise ConfigError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if len(self.inputs) != len(self.labels):
            raise ConfigError(
                f"{len(self.inputs)} input rows but {len(self.labels)} labels")
        if len(self.labels) and self.labels.max() >= self.n_classes:
            raise ConfigError(
                f"label {self.labels.max()} out of range for {self.n_classes} classes")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray, role: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.n_classes,
                              role if role is not None else self.role)


def concat_datasets(parts: list[LabeledDataset], role: str | None = None) -> LabeledDataset:
    if not parts:
        raise UsageError("concat_datasets: nothing to concatenate")
    n_classes = max(p.n_classes for p in parts)
    return LabeledDataset(
        np.concatenate([p.inputs for p in parts]),
        np.concatenate([p.labels for p in parts]),
        n_classes,
        role if role is not None else parts[0].role)


@dataclass
class Experience:
    id: int
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    classes: frozenset[int]


@dataclass
class Stream:
    experiences: list[Experience]
    total_classes: int

    def __len__(self) -> int:
        return len(self.experiences)


# ---------------------------------------------------------------------------
# IDX parsing / writing
# ---------------------------------------------------------------------------


def _read_u32(buf: bytes, offset: int, what: str) -> int:
    if offset + 4 > len(buf):
        raise IdxParseError(f"truncated while reading {what}", offset)
    return struct.unpack_from(">I", buf, offset)[0]


def _parse_idx(buf: bytes, expect_ndim: int, what: str) -> np.ndarray:
    magic = _read_u32(buf, 0, f"{what} magic number")
    if magic >> 16 != 0:
        raise IdxParseError(f"bad magic 0x{magic:08x} in {what} (first two bytes nonzero)", 0)
    dtype_code = (magic >> 8) & 0xFF
    ndim = magic & 0xFF
    if dtype_code != 0x08:
        raise IdxParseError(f"unsupported dtype code 0x{dtype_code:02x} in {what}", 2)
    if ndim != expect_ndim:
        raise IdxParseError(f"{what} expects {expect_ndim} dimensions, got {ndim}", 3)
    dims = []
    offset = 4
    for i in range(ndim):
        dims.append(_read_u32(buf, offset, f"{what} dimension {i}"))
        offset += 4
    expected = math.prod(dims)
    payload = buf[offset:]
    if len(payload) != expected:
        raise IdxParseError(
            f"{what} payload has {len(payload)} bytes, expected {expected}", offset)
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(path_images: str, path_labels: str, role: str = "train") -> LabeledDataset:
    """Read an images/labels IDX pair into a dataset with pixels scaled to [0, 1]."""
    with open(path_images, "rb") as f:
        images = _parse_idx(f.read(), expect_ndim=3, what=f"image file {path_images}")
    with open(path_labels, "rb") as f:
        labels = _parse_idx(f.read(), expect_ndim=1, what=f"label file {path_labels}")
    if images.shape[0] != labels.shape[0]:
        raise IdxParseError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    n = images.shape[0]
    flat = images.reshape(n, -1).astype(np.float64) / 255.0
    n_classes = int(labels.max()) + 1 if n else 0
    return LabeledDataset(flat, labels.astype(np.int64), n_classes, role)


def write_idx_images(path: str, images: np.ndarray) -> None:
    """Write a (N, rows, cols) uint8 array in IDX image layout."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise UsageError(f"write_idx_images expects (N, rows, cols), got {images.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_MAGIC_IMAGES, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path: str, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_MAGIC_LABELS, labels.shape[0]))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# Stream construction
# ---------------------------------------------------------------------------


def _stratified_val_indices(labels: np.ndarray, pool_idx: np.ndarray,
                            val_fraction: float, rng: SeededRng) -> np.ndarray:
    """Pick ceil(val_fraction * pool) indices, spread across classes.

    Per-class quotas start at floor(fraction * class size); the remainder is
    assigned by largest fractional part (ties broken by class id) so the
    total matches the ceiling exactly.
    """
    total_val = math.ceil(val_fraction * len(pool_idx))
    classes = np.unique(labels[pool_idx])
    per_class = {}
    remainders = []
    for c in classes:
        cls_idx = pool_idx[labels[pool_idx] == c]
        exact = val_fraction * len(cls_idx)
        per_class[c] = (cls_idx, int(math.floor(exact)))
        remainders.append((-(exact - math.floor(exact)), c))
    assigned = sum(q for _, q in per_class.values())
    remainders.sort()
    for _, c in remainders:
        if assigned >= total_val:
            break
        cls_idx, q = per_class[c]
        if q < len(cls_idx):
            per_class[c] = (cls_idx, q + 1)
            assigned += 1
    picks = []
    for c in classes:
        cls_idx, q = per_class[c]
        order = rng.gen.permutation(len(cls_idx))
        picks.append(cls_idx[order[:q]])
    return np.sort(np.concatenate(picks)) if picks else np.array([], dtype=np.int64)


def make_class_incremental(ds: LabeledDataset, test_ds: LabeledDataset,
                           n_experiences: int, class_order: list[int] | None = None,
                           val_fraction: float = 0.2, seed: int = 0) -> Stream:
    """Split a dataset into a class-incremental stream.

    Experience i holds the classes class_order[i*k:(i+1)*k]; inside each
    experience a seeded, class-stratified shuffle carves the validation split
    out of the training pool. Test partitions come from the separate test
    dataset, never from the pool.
    """
    if ds.n_classes % n_experiences != 0:
        raise ConfigError(
            f"{ds.n_classes} classes not divisible into {n_experiences} experiences")
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    if class_order is None:
        class_order = list(range(ds.n_classes))
    if sorted(class_order) != list(range(ds.n_classes)):
        raise ConfigError(f"class_order must be a permutation of 0..{ds.n_classes - 1}")

    k = ds.n_classes // n_experiences
    rng = SeededRng(seed)
    experiences = []
    for i in range(n_experiences):
        classes = class_order[i * k:(i + 1) * k]
        pool = np.flatnonzero(np.isin(ds.labels, classes))
        val_idx = _stratified_val_indices(ds.labels, pool, val_fraction, rng.child(i))
        val_mask = np.zeros(len(ds), dtype=bool)
        val_mask[val_idx] = True
        train_idx = pool[~val_mask[pool]]
        test_idx = np.flatnonzero(np.isin(test_ds.labels, classes))
        experiences.append(Experience(
            id=i,
            train=ds.subset(train_idx, role="train"),
            val=ds.subset(val_idx, role="val"),
            test=test_ds.subset(test_idx, role="test"),
            classes=frozenset(int(c) for c in classes)))
    return Stream(experiences, ds.n_classes)


def make_synthetic_gaussian_stream(n_classes: int, dim: int, n_train_per_class: int,
                                   n_val_per_class: int, n_test_per_class: int,
                                   class_means_scale: float, n_experiences: int,
                                   seed: int = 0) -> Stream:
    """Fast synthetic stream: one isotropic Gaussian blob per class.

    Class means are seeded random directions of norm `class_means_scale`;
    samples are squashed into [0, 1] by a fixed affine map so the dataset
    honors the pixel-range invariant. scale 0 makes every class identical.
    """
    for name, v in [("n_classes", n_classes), ("dim", dim),
                    ("n_train_per_class", n_train_per_class),
                    ("n_val_per_class", n_val_per_class),
                    ("n_test_per_class", n_test_per_class),
                    ("n_experiences", n_experiences)]:
        if v <= 0:
            raise ConfigError(f"{name} must be positive, got {v}")
    if class_means_scale < 0:
        raise ConfigError(f"class_means_scale must be nonnegative, got {class_means_scale}")

    rng = SeededRng(seed, tags=(9001,))
    means = rng.gen.normal(size=(n_classes, dim))
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    means = means / norms * class_means_scale

    span = class_means_scale + 5.0  # covers the blobs out to ~5 sigma

    def draw(count_per_class, role):
        xs, ys = [], []
        for c in range(n_classes):
            pts = means[c] + rng.gen.normal(size=(count_per_class, dim))
            xs.append(pts)
            ys.append(np.full(count_per_class, c, dtype=np.int64))
        x = np.clip((np.concatenate(xs) + span) / (2.0 * span), 0.0, 1.0)
        return LabeledDataset(x, np.concatenate(ys), n_classes, role)

    pool = draw(n_train_per_class + n_val_per_class, "train")
    test = draw(n_test_per_class, "test")
    val_fraction = n_val_per_class / (n_train_per_class + n_val_per_class)
    return make_class_incremental(pool, test, n_experiences,
                                  val_fraction=val_fraction, seed=seed)


def minibatches(ds: LabeledDataset, batch_size: int, rng: SeededRng):
    """Yield (inputs, labels) batches over a seeded permutation of the dataset.

    All batches are full-size except possibly the last; every example appears
    exactly once per epoch.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if len(ds) == 0:
        raise UsageError("minibatches: dataset is empty")
    order = rng.gen.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.inputs[idx], ds.labels[idx]
