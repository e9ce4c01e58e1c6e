"""Sequential-digits data: IDX ingestion, splits, batches, surrogate corpus.

Images are consumed as length-784 scalar sequences (28x28 flattened row
major, pixels scaled to [0, 1]). Real MNIST IDX files are read when present;
nothing is ever fetched over the network. For offline environments,
`build_surrogate_corpus` renders an MNIST-shaped stand-in from the real
handwritten digits bundled with scikit-learn, written out in IDX format so
the identical ingestion path runs either way.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SEQ_LEN = 784

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"

DOWNLOAD_HINT = """\
MNIST IDX files were not found. Place these four files (optionally .gz) in
the data directory:
  train-images-idx3-ubyte   train-labels-idx1-ubyte
  t10k-images-idx3-ubyte    t10k-labels-idx1-ubyte
They are mirrored at e.g. https://ossci-datasets.s3.amazonaws.com/mnist/
(file names above with a .gz suffix). Alternatively generate an offline
surrogate corpus with:  s4dquant prepare-data --data-dir <dir>"""


class DataError(RuntimeError):
    pass


@dataclass
class SequenceSample:
    values: np.ndarray  # [784] floats in [0, 1]
    label: int


@dataclass
class SplitSizes:
    train: int = 8000
    calibration: int = 512
    validation: int = 1000
    test: int = 2000

    def to_dict(self) -> dict:
        return self.__dict__.copy()

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSizes":
        return cls(**d)


@dataclass
class DatasetSplit:
    train: list[SequenceSample]
    calibration: list[SequenceSample]
    validation: list[SequenceSample]
    test: list[SequenceSample]
    seed: int


def _open_maybe_gz(path: Path):
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise DataError(f"missing data file {path} (also tried {gz.name})\n\n{DOWNLOAD_HINT}")


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataError(f"truncated IDX file while reading {what}")
    return buf


def parse_idx(images_path, labels_path) -> list[SequenceSample]:
    """Parse an images/labels IDX pair into scaled sequence samples."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with _open_maybe_gz(images_path) as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IMAGE_MAGIC:
            raise DataError(f"bad image magic 0x{magic:08x} in {images_path.name}")
        if rows * cols != SEQ_LEN:
            raise DataError(f"expected 28x28 images, got {rows}x{cols}")
        pixels = np.frombuffer(
            _read_exact(f, count * rows * cols, "pixels"), dtype=np.uint8
        ).reshape(count, rows * cols)
    with _open_maybe_gz(labels_path) as f:
        magic, lcount = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != LABEL_MAGIC:
            raise DataError(f"bad label magic 0x{magic:08x} in {labels_path.name}")
        labels = np.frombuffer(_read_exact(f, lcount, "labels"), dtype=np.uint8)
    if count != lcount:
        raise DataError(f"image/label count mismatch: {count} vs {lcount}")
    if labels.size and labels.max() > 9:
        raise DataError(f"label {labels.max()} outside 0-9")
    scaled = pixels.astype(np.float64) / 255.0
    return [SequenceSample(scaled[i], int(labels[i])) for i in range(count)]


def serialize_idx(images_u8: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write a standard big-endian IDX pair (28x28 u8 images, u8 labels)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n = images_u8.shape[0]
    if images_u8.shape[1:] != (28, 28) or labels.shape != (n,):
        raise DataError("serialize_idx expects [n, 28, 28] images and [n] labels")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, 28, 28))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(labels.tobytes())


def load_corpus(data_dir) -> tuple[list[SequenceSample], list[SequenceSample]]:
    """Read the four standard files from a directory; raises with guidance if absent."""
    d = Path(data_dir)
    train = parse_idx(d / TRAIN_IMAGES, d / TRAIN_LABELS)
    test = parse_idx(d / TEST_IMAGES, d / TEST_LABELS)
    return train, test


# ---------------------------------------------------------------------------
# splits and batches

def _per_class_counts(total: int, classes: Sequence[int]) -> dict[int, int]:
    base, rem = divmod(total, len(classes))
    return {c: base + (1 if i < rem else 0) for i, c in enumerate(sorted(classes))}


def make_splits(
    train_samples: list[SequenceSample],
    test_samples: list[SequenceSample],
    sizes: SplitSizes,
    seed: int,
) -> DatasetSplit:
    """Disjoint class-balanced splits, reproducible under the seed.

    train/calibration/validation are carved out of the training corpus; test
    comes from the held-out corpus.
    """
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(train_samples):
        by_class.setdefault(s.label, []).append(i)
    classes = sorted(by_class)
    for c in classes:
        idx = np.array(by_class[c])
        by_class[c] = list(idx[rng.permutation(idx.size)])

    def take(total: int) -> list[SequenceSample]:
        counts = _per_class_counts(total, classes)
        picked = []
        for c in classes:
            pool = by_class[c]
            if len(pool) < counts[c]:
                raise DataError(
                    f"split sizes oversubscribe class {c}: need {counts[c]}, have {len(pool)}"
                )
            picked.extend(pool[: counts[c]])
            by_class[c] = pool[counts[c] :]
        return [train_samples[i] for i in sorted(picked)]

    train = take(sizes.train)
    calibration = take(sizes.calibration)
    validation = take(sizes.validation)

    by_class_test: dict[int, list[int]] = {}
    for i, s in enumerate(test_samples):
        by_class_test.setdefault(s.label, []).append(i)
    tclasses = sorted(by_class_test)
    counts = _per_class_counts(sizes.test, tclasses)
    picked = []
    for c in tclasses:
        idx = np.array(by_class_test[c])
        idx = idx[rng.permutation(idx.size)]
        if idx.size < counts[c]:
            raise DataError(
                f"test size oversubscribes class {c}: need {counts[c]}, have {idx.size}"
            )
        picked.extend(idx[: counts[c]])
    test = [test_samples[i] for i in sorted(picked)]
    return DatasetSplit(train, calibration, validation, test, seed)


def batches(
    samples: list[SequenceSample],
    batch_size: int,
    seed: Optional[int] = None,
    epoch: int = 0,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (values [B, 784], labels [B]); shuffled from (seed, epoch) when seeded."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(samples)
    order = (
        np.random.default_rng([seed, epoch]).permutation(n)
        if seed is not None
        else np.arange(n)
    )
    for start in range(0, n, batch_size):
        chunk = order[start : start + batch_size]
        values = np.stack([samples[i].values for i in chunk])
        labels = np.array([samples[i].label for i in chunk], dtype=np.int64)
        yield values, labels


# ---------------------------------------------------------------------------
# offline surrogate corpus

def build_surrogate_corpus(
    data_dir, n_train: int = 12000, n_test: int = 3000, seed: int = 0
) -> None:
    """Render an MNIST-shaped corpus from scikit-learn's bundled digit scans.

    The 1797 genuine 8x8 handwriting images are split into disjoint source
    pools (so test digits are never seen in training), upsampled to 28x28,
    and augmented with seeded affine jitter. Output is written as the four
    standard IDX files into data_dir.
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    digits = load_digits()
    images = digits.images / 16.0  # [1797, 8, 8]
    labels = digits.target
    rng = np.random.default_rng(seed)

    # upsample every source digit once
    big = np.stack([ndimage.zoom(img, 3.5, order=1) for img in images])
    big = np.clip(big, 0.0, 1.0)

    pools: dict[str, dict[int, np.ndarray]] = {"train": {}, "test": {}}
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        pools["train"][c] = idx[idx % 3 != 0]  # two thirds of each class
        pools["test"][c] = idx[idx % 3 == 0]

    def render(which: str, total: int) -> tuple[np.ndarray, np.ndarray]:
        counts = _per_class_counts(total, range(10))
        imgs = np.empty((total, 28, 28), dtype=np.uint8)
        labs = np.empty(total, dtype=np.uint8)
        k = 0
        for c in range(10):
            pool = pools[which][c]
            for _ in range(counts[c]):
                base = big[pool[rng.integers(pool.size)]]
                angle = rng.uniform(-0.21, 0.21)  # radians, ~12 degrees
                s = np.exp(rng.uniform(-0.12, 0.12))
                ca, sa = np.cos(angle), np.sin(angle)
                mat = np.array([[ca, -sa], [sa, ca]]) * s
                center = np.array([13.5, 13.5])
                shift = rng.uniform(-2.5, 2.5, size=2)
                offset = center - mat @ (center + shift)
                img = ndimage.affine_transform(base, mat, offset=offset, order=1, mode="constant")
                img = img * rng.uniform(0.85, 1.1) + rng.normal(0, 0.015, size=(28, 28))
                imgs[k] = (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
                labs[k] = c
                k += 1
        perm = rng.permutation(total)
        return imgs[perm], labs[perm]

    d = Path(data_dir)
    d.mkdir(parents=True, exist_ok=True)
    tr_imgs, tr_labs = render("train", n_train)
    te_imgs, te_labs = render("test", n_test)
    serialize_idx(tr_imgs, tr_labs, d / TRAIN_IMAGES, d / TRAIN_LABELS)
    serialize_idx(te_imgs, te_labs, d / TEST_IMAGES, d / TEST_LABELS)


def ensure_corpus(data_dir, allow_surrogate: bool, surrogate_seed: int = 0):
    """Load the corpus; build the surrogate first if it is allowed and needed."""
    d = Path(data_dir)
    have = (d / TRAIN_IMAGES).exists() or (d / (TRAIN_IMAGES + ".gz")).exists()
    if not have:
        if not allow_surrogate:
            raise DataError(f"no data in {d}\n\n{DOWNLOAD_HINT}")
        build_surrogate_corpus(d, seed=surrogate_seed)
    return load_corpus(d)
