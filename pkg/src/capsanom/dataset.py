"""MNIST ingestion and the imbalanced binary subset protocol.

Pipeline: parse IDX files into a corpus of byte images -> carve a
stratified validation split off the training set -> for a chosen normal
digit, build a binary dataset containing every instance of that digit
(label 0) plus a uniform sample from the pooled other nine digits
(label 1), sized at floor(ratio * normals).

Datasets serialize to the versioned container format with their build spec
and per-digit provenance embedded, so any subset can be audited or rebuilt.

A deterministic synthetic corpus (seven-segment style glyphs with random
shifts and pixel noise) stands in for MNIST wherever the real files are not
available, e.g. in the test suite.
"""

from __future__ import annotations

import gzip
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from capsanom.container import read_container, write_container
from capsanom.errors import FormatError
from capsanom.rng import Rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# Conventional file names of the four official MNIST archives.
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class MnistSplit:
    """Byte images [N, 28, 28] with digit labels [N]."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class MnistCorpus:
    train: MnistSplit
    test: MnistSplit


@dataclass(frozen=True)
class ImbalancedDatasetSpec:
    """Recipe for one binary imbalanced subset."""

    normal_class: int
    anomaly_ratio: float = 0.1
    seed: int = 0
    validation_size: int = 5000

    def __post_init__(self):
        if not 0 <= self.normal_class <= 9:
            raise ValueError(f"normal_class must be a digit, got {self.normal_class}")
        if not 0.0 < self.anomaly_ratio <= 1.0:
            raise ValueError(
                f"anomaly_ratio must be in (0, 1], got {self.anomaly_ratio}"
            )


@dataclass
class LabeledDataset:
    """A materialized binary subset: 0 = normal/majority, 1 = anomaly."""

    split: str
    images: np.ndarray  # uint8 [N, 28, 28]
    labels: np.ndarray  # uint8 [N], values in {0, 1}
    original_digits: np.ndarray  # uint8 [N], the source MNIST digit
    spec: ImbalancedDatasetSpec
    provenance: dict  # per-digit sample counts

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def pixels(self) -> np.ndarray:
        """Images flattened to [N, 784] float64 in [0, 1]."""
        return self.images.reshape(len(self), -1).astype(np.float64) / 255.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.split == other.split
            and self.spec == other.spec
            and self.provenance == other.provenance
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.original_digits, other.original_digits)
        )


# -- IDX parsing ---------------------------------------------------------------


def _read_bytes(path: str | Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":  # gzip, as distributed upstream
        raw = gzip.decompress(raw)
    return raw


def _be32(blob: bytes, offset: int, path) -> int:
    if offset + 4 > len(blob):
        raise FormatError(f"{path}: truncated header at byte {offset}")
    return int.from_bytes(blob[offset : offset + 4], "big")


def load_idx_images(path: str | Path) -> np.ndarray:
    """Parse an IDX image file (big-endian, magic 0x00000803) to uint8 [N,H,W]."""
    blob = _read_bytes(path)
    magic = _be32(blob, 0, path)
    if magic != IMAGE_MAGIC:
        raise FormatError(
            f"{path}: bad image magic 0x{magic:08x} at byte 0, expected 0x{IMAGE_MAGIC:08x}"
        )
    count = _be32(blob, 4, path)
    rows = _be32(blob, 8, path)
    cols = _be32(blob, 12, path)
    expected = 16 + count * rows * cols
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for {count} images of "
            f"{rows}x{cols}, found {len(blob)} (data starts at byte 16)"
        )
    return np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(count, rows, cols).copy()


def load_idx_labels(path: str | Path) -> np.ndarray:
    """Parse an IDX label file (big-endian, magic 0x00000801) to uint8 [N]."""
    blob = _read_bytes(path)
    magic = _be32(blob, 0, path)
    if magic != LABEL_MAGIC:
        raise FormatError(
            f"{path}: bad label magic 0x{magic:08x} at byte 0, expected 0x{LABEL_MAGIC:08x}"
        )
    count = _be32(blob, 4, path)
    expected = 8 + count
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for {count} labels, found "
            f"{len(blob)} (data starts at byte 8)"
        )
    return np.frombuffer(blob, dtype=np.uint8, offset=8).copy()


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    blob = (
        IMAGE_MAGIC.to_bytes(4, "big")
        + n.to_bytes(4, "big")
        + rows.to_bytes(4, "big")
        + cols.to_bytes(4, "big")
        + images.tobytes()
    )
    Path(path).write_bytes(blob)


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    blob = LABEL_MAGIC.to_bytes(4, "big") + len(labels).to_bytes(4, "big") + labels.tobytes()
    Path(path).write_bytes(blob)


def load_mnist(images_path: str | Path, labels_path: str | Path) -> MnistSplit:
    """Load one split from a pair of IDX files, rejecting count mismatches."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(
            f"{images_path} has {len(images)} images but {labels_path} has "
            f"{len(labels)} labels"
        )
    if labels.max(initial=0) > 9:
        raise FormatError(f"{labels_path}: labels above 9 present")
    return MnistSplit(images=images, labels=labels)


def load_corpus(mnist_dir: str | Path) -> MnistCorpus:
    """Load train and test splits from a directory of the four MNIST files.

    Accepts either the raw IDX files or their .gz forms.
    """
    mnist_dir = Path(mnist_dir)

    def find(stem: str) -> Path:
        for candidate in (mnist_dir / stem, mnist_dir / (stem + ".gz")):
            if candidate.exists():
                return candidate
        raise FormatError(f"{mnist_dir}: missing MNIST file {stem}[.gz]")

    train_i, train_l = MNIST_FILES["train"]
    test_i, test_l = MNIST_FILES["test"]
    return MnistCorpus(
        train=load_mnist(find(train_i), find(train_l)),
        test=load_mnist(find(test_i), find(test_l)),
    )


# -- splitting and subset construction ----------------------------------------


def stratified_validation_split(
    split: MnistSplit, validation_size: int, seed: int
) -> tuple[MnistSplit, MnistSplit]:
    """Carve a stratified validation set out of a split.

    Per-digit validation counts follow the largest-remainder rule, so each
    digit's share matches its share of the source split within one instance.
    Both outputs keep the source ordering; the index sets are disjoint.
    """
    n = len(split)
    if not 0 < validation_size < n:
        raise ValueError(f"validation_size must be in (0, {n}), got {validation_size}")
    rng = Rng(seed).split("validation-split")
    counts = np.bincount(split.labels, minlength=10)
    exact = validation_size * counts / n
    take = np.floor(exact).astype(np.int64)
    remainder = validation_size - int(take.sum())
    # distribute leftovers to the largest fractional parts; ties to low digits
    order = np.lexsort((np.arange(10), -(exact - take)))
    take[order[:remainder]] += 1

    val_mask = np.zeros(n, dtype=bool)
    for digit in range(10):
        positions = np.flatnonzero(split.labels == digit)
        if take[digit] > len(positions):
            raise ValueError(f"digit {digit}: cannot take {take[digit]} of {len(positions)}")
        chosen = rng.split(digit).choice(len(positions), int(take[digit]), replace=False)
        val_mask[positions[chosen]] = True

    validation = MnistSplit(images=split.images[val_mask], labels=split.labels[val_mask])
    rest = MnistSplit(images=split.images[~val_mask], labels=split.labels[~val_mask])
    return rest, validation


def build_imbalanced_subset(
    split: MnistSplit, spec: ImbalancedDatasetSpec, split_name: str = "train"
) -> LabeledDataset:
    """Build one binary imbalanced dataset from a digit-labeled split.

    Keeps every instance of ``spec.normal_class`` (relabeled 0) and samples
    floor(anomaly_ratio * normals) instances uniformly from the pooled other
    nine digits (relabeled 1). Fully determined by (spec, split_name).
    """
    normal_idx = np.flatnonzero(split.labels == spec.normal_class)
    if len(normal_idx) == 0:
        raise ValueError(f"split has no instances of class {spec.normal_class}")
    other_idx = np.flatnonzero(split.labels != spec.normal_class)
    n_anomalies = int(np.floor(spec.anomaly_ratio * len(normal_idx)))
    if n_anomalies > len(other_idx):
        raise ValueError(
            f"need {n_anomalies} anomalies but only {len(other_idx)} "
            f"non-{spec.normal_class} instances are available"
        )
    rng = Rng(spec.seed).split("subset", split_name, spec.normal_class)
    picked = other_idx[rng.choice(len(other_idx), n_anomalies, replace=False)]

    indices = np.concatenate([normal_idx, picked])
    labels = np.concatenate(
        [np.zeros(len(normal_idx), dtype=np.uint8), np.ones(n_anomalies, dtype=np.uint8)]
    )
    digits = split.labels[indices]
    per_digit = {str(d): int(np.sum(digits == d)) for d in range(10)}
    return LabeledDataset(
        split=split_name,
        images=split.images[indices].copy(),
        labels=labels,
        original_digits=digits.astype(np.uint8),
        spec=spec,
        provenance={"per_digit": per_digit},
    )


def build_all_splits(
    corpus: MnistCorpus, spec: ImbalancedDatasetSpec
) -> dict[str, LabeledDataset]:
    """Train/validation/test subsets for one spec, sharing the same recipe."""
    rest, validation = stratified_validation_split(
        corpus.train, spec.validation_size, spec.seed
    )
    return {
        "train": build_imbalanced_subset(rest, spec, "train"),
        "validation": build_imbalanced_subset(validation, spec, "validation"),
        "test": build_imbalanced_subset(corpus.test, spec, "test"),
    }


# -- dataset container I/O -----------------------------------------------------


def export_dataset(dataset: LabeledDataset, path: str | Path) -> None:
    """Serialize to the container format; round-trips bit-exactly."""
    write_container(
        path,
        "dataset",
        {
            "split": dataset.split,
            "spec": asdict(dataset.spec),
            "provenance": dataset.provenance,
        },
        {
            "images": dataset.images,
            "labels": dataset.labels,
            "original_digits": dataset.original_digits,
        },
    )


def import_dataset(path: str | Path) -> LabeledDataset:
    _, meta, arrays = read_container(path, expect_kind="dataset")
    return LabeledDataset(
        split=meta["split"],
        images=arrays["images"],
        labels=arrays["labels"],
        original_digits=arrays["original_digits"],
        spec=ImbalancedDatasetSpec(**meta["spec"]),
        provenance=meta["provenance"],
    )


# -- synthetic corpus ----------------------------------------------------------

# Seven-segment glyphs: (top, top-right, bottom-right, bottom, bottom-left,
# top-left, middle), drawn in a box on the 28x28 canvas.
_SEGMENTS = {
    0: "ABCDEF",
    1: "BC",
    2: "ABGED",
    3: "ABGCD",
    4: "FGBC",
    5: "AFGCD",
    6: "AFGEDC",
    7: "ABC",
    8: "ABCDEFG",
    9: "ABCDFG",
}


_SEGMENT_NAMES = "ABCDEFG"

_R0, _R1, _RM = 6, 20, 13
_C0, _C1 = 9, 18
_STROKES = {
    "A": (slice(_R0, _R0 + 2), slice(_C0, _C1 + 1)),
    "D": (slice(_R1 - 1, _R1 + 1), slice(_C0, _C1 + 1)),
    "G": (slice(_RM, _RM + 2), slice(_C0, _C1 + 1)),
    "F": (slice(_R0, _RM + 1), slice(_C0, _C0 + 2)),
    "B": (slice(_R0, _RM + 1), slice(_C1 - 1, _C1 + 1)),
    "E": (slice(_RM, _R1 + 1), slice(_C0, _C0 + 2)),
    "C": (slice(_RM, _R1 + 1), slice(_C1 - 1, _C1 + 1)),
}


def synthetic_corpus(
    seed: int, train_per_class: int = 200, test_per_class: int = 50
) -> MnistCorpus:
    """MNIST-shaped corpus of noisy, shifted seven-segment digits.

    A deterministic stand-in with the same dtypes, shapes, and label space
    as the real corpus: byte pixels, 28x28 images, digits 0-9. The class
    determines which segments are drawn; each sample varies every segment's
    intensity independently and adds a random shift (up to 4 px) and pixel
    noise. The per-segment variation matters: classes stay separable by
    segment pattern while individual pixels look alike across classes,
    which keeps holistic detectors (reconstruction error, isolation on raw
    pixels) honestly hard, as on real handwriting.
    """
    rng = Rng(seed).split("synthetic")

    def make(split_label: str, per_class: int) -> MnistSplit:
        r = rng.split(split_label)
        n = per_class * 10
        labels = np.repeat(np.arange(10, dtype=np.uint8), per_class)
        images = np.empty((n, 28, 28), dtype=np.uint8)
        shifts = r.split("shift").integers(-4, 5, size=(n, 2))
        seg_intensity = r.split("intensity").uniform(0.35, 1.0, size=(n, 7))
        noise = r.split("noise").normal(0.0, 0.08, size=(n, 28, 28))
        n_blobs = r.split("blob-count").integers(2, 6, size=n)
        blob_pos = r.split("blob-pos").integers(0, 26, size=(n, 5, 2))
        blob_val = r.split("blob-val").uniform(0.3, 0.9, size=(n, 5))
        for i in range(n):
            canvas = np.zeros((28, 28))
            for s, name in enumerate(_SEGMENT_NAMES):
                if name in _SEGMENTS[labels[i]]:
                    canvas[_STROKES[name]] = seg_intensity[i, s]
            img = np.roll(canvas, tuple(shifts[i]), axis=(0, 1))
            for b in range(n_blobs[i]):  # label-independent clutter
                by, bx = blob_pos[i, b]
                img[by : by + 3, bx : bx + 3] = np.maximum(
                    img[by : by + 3, bx : bx + 3], blob_val[i, b]
                )
            img = np.clip(img + noise[i], 0.0, 1.0)
            images[i] = np.round(img * 255.0).astype(np.uint8)
        perm = r.split("order").permutation(n)
        return MnistSplit(images=images[perm], labels=labels[perm])

    return MnistCorpus(
        train=make("train", train_per_class), test=make("test", test_per_class)
    )
