"""Dataset ingestion for the two supported corpora.

MNIST is parsed from IDX files (big-endian magic 0x801/0x803), CIFAR-10
from the 3073-byte-record binary batches. Files may be plain or gzipped;
the canonical gzip archives are checksum-verified against their well-known
md5 digests before first use. Everything loads fully into memory and all
shuffling/augmentation is driven by explicit seeds, so a full epoch is
bit-identical across runs.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATA_ROOT_ENV = "SDBNN_DATA"

MAGIC_IMAGES = 0x00000803
MAGIC_LABELS = 0x00000801

# md5 of the canonical gzip archives
KNOWN_DIGESTS = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CIFAR_DIR = "cifar-10-batches-bin"
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}
_CIFAR_RECORD = 3073


class DataFormatError(ValueError):
    """Raw file violates its format spec (magic, size, record count)."""


class ChecksumError(ValueError):
    """Raw file digest does not match the expected value."""


@dataclass(frozen=True)
class DatasetSource:
    kind: str                      # mnist | cifar10
    root: Path
    split: str                     # train | test
    digests: dict = field(default_factory=dict, hash=False)  # filename -> md5, overrides table
    verify: bool = True

    def __post_init__(self):
        if self.kind not in ("mnist", "cifar10"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")


@dataclass
class Dataset:
    """Fully in-memory dataset: raw uint8 images plus labels."""

    kind: str
    split: str
    images: np.ndarray   # uint8 [N, C, H, W]
    labels: np.ndarray   # uint8 [N]

    def __len__(self) -> int:
        return self.images.shape[0]

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean/std of images scaled to [0, 1]."""
        x = self.images.astype(np.float64) / 255.0
        return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


@dataclass
class Batch:
    images: np.ndarray   # float32 [N, C, H, W], normalized
    labels: np.ndarray   # int64 [N]
    epoch: int = 0
    step: int = 0


def default_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def _read_raw(path: Path, expected_md5: str | None, verify: bool) -> bytes:
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            blob = gz.read_bytes()
            digest = expected_md5 or KNOWN_DIGESTS.get(gz.name)
            if verify and digest is not None:
                got = hashlib.md5(blob).hexdigest()
                if got != digest:
                    raise ChecksumError(f"{gz.name}: md5 {got} != expected {digest}")
            return gzip.decompress(blob)
        raise FileNotFoundError(f"dataset file not found: {path} (or {path}.gz)")
    blob = path.read_bytes()
    if verify and expected_md5 is not None:
        got = hashlib.md5(blob).hexdigest()
        if got != expected_md5:
            raise ChecksumError(f"{path.name}: md5 {got} != expected {expected_md5}")
    return blob


def parse_idx_images(blob: bytes) -> np.ndarray:
    if len(blob) < 16:
        raise DataFormatError("IDX image file shorter than its header")
    magic, n, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != MAGIC_IMAGES:
        raise DataFormatError(f"bad IDX image magic 0x{magic:08x}, want 0x{MAGIC_IMAGES:08x}")
    expected = 16 + n * rows * cols
    if len(blob) != expected:
        raise DataFormatError(f"IDX image file truncated: {len(blob)} bytes, want {expected}")
    data = np.frombuffer(blob, dtype=np.uint8, offset=16)
    return data.reshape(n, 1, rows, cols)


def parse_idx_labels(blob: bytes) -> np.ndarray:
    if len(blob) < 8:
        raise DataFormatError("IDX label file shorter than its header")
    magic, n = struct.unpack(">II", blob[:8])
    if magic != MAGIC_LABELS:
        raise DataFormatError(f"bad IDX label magic 0x{magic:08x}, want 0x{MAGIC_LABELS:08x}")
    if len(blob) != 8 + n:
        raise DataFormatError(f"IDX label file truncated: {len(blob)} bytes, want {8 + n}")
    return np.frombuffer(blob, dtype=np.uint8, offset=8)


def serialize_idx_images(images: np.ndarray) -> bytes:
    n, c, h, w = images.shape
    if c != 1 or images.dtype != np.uint8:
        raise ValueError("IDX images must be single-channel uint8")
    return struct.pack(">IIII", MAGIC_IMAGES, n, h, w) + images.tobytes()


def serialize_idx_labels(labels: np.ndarray) -> bytes:
    return struct.pack(">II", MAGIC_LABELS, labels.shape[0]) + labels.astype(np.uint8).tobytes()


def parse_cifar_batch(blob: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(blob) % _CIFAR_RECORD:
        raise DataFormatError(
            f"CIFAR-10 batch size {len(blob)} is not a multiple of {_CIFAR_RECORD}")
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].copy()
    images = records[:, 1:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def serialize_cifar_batch(images: np.ndarray, labels: np.ndarray) -> bytes:
    n = images.shape[0]
    rec = np.empty((n, _CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images.reshape(n, -1)
    return rec.tobytes()


def load(src: DatasetSource) -> Dataset:
    """Read and validate the raw files for one split, fully into memory."""
    if src.kind == "mnist":
        img_name, lbl_name = MNIST_FILES[src.split]
        img_blob = _read_raw(Path(src.root) / img_name, src.digests.get(img_name), src.verify)
        lbl_blob = _read_raw(Path(src.root) / lbl_name, src.digests.get(lbl_name), src.verify)
        images = parse_idx_images(img_blob)
        labels = parse_idx_labels(lbl_blob)
    else:
        parts_i, parts_l = [], []
        for fname in CIFAR_FILES[src.split]:
            for candidate in (Path(src.root) / CIFAR_DIR / fname, Path(src.root) / fname):
                if candidate.exists() or candidate.with_name(candidate.name + ".gz").exists():
                    blob = _read_raw(candidate, src.digests.get(fname), src.verify)
                    break
            else:
                raise FileNotFoundError(f"CIFAR-10 batch not found: {fname} under {src.root}")
            imgs, lbls = parse_cifar_batch(blob)
            parts_i.append(imgs)
            parts_l.append(lbls)
        images = np.concatenate(parts_i)
        labels = np.concatenate(parts_l)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}")
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"label out of range: {labels.max()}")
    return Dataset(kind=src.kind, split=src.split, images=images, labels=labels)


@dataclass(frozen=True)
class AugmentConfig:
    """pad-4 random crop + horizontal flip; the CIFAR-10 standard recipe."""

    random_crop_pad: int = 0
    hflip: bool = False

    @staticmethod
    def for_dataset(kind: str) -> "AugmentConfig":
        if kind == "cifar10":
            return AugmentConfig(random_crop_pad=4, hflip=True)
        return AugmentConfig()  # MNIST trains unaugmented


def augment(images: np.ndarray, config: AugmentConfig, rng_seed: int) -> np.ndarray:
    """Deterministic augmentation of a uint8 image batch (shape preserved)."""
    if config.random_crop_pad == 0 and not config.hflip:
        return images
    rng = np.random.default_rng(np.random.PCG64(rng_seed))
    out = images
    if config.random_crop_pad:
        p = config.random_crop_pad
        n, c, h, w = out.shape
        padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=out.dtype)
        padded[:, :, p : p + h, p : p + w] = out
        ys = rng.integers(0, 2 * p + 1, size=n)
        xs = rng.integers(0, 2 * p + 1, size=n)
        out = np.stack([padded[i, :, ys[i] : ys[i] + h, xs[i] : xs[i] + w] for i in range(n)])
    if config.hflip:
        flips = rng.random(out.shape[0]) < 0.5
        out = out.copy()
        out[flips] = out[flips, :, :, ::-1]
    return out


class Normalizer:
    """Per-channel (x/255 - mean) / std with constants from the train split."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)

    @staticmethod
    def fit(train: Dataset) -> "Normalizer":
        mean, std = train.channel_stats()
        return Normalizer(mean, np.maximum(std, 1e-8))

    def __call__(self, images_u8: np.ndarray) -> np.ndarray:
        x = images_u8.astype(np.float32) / np.float32(255.0)
        return (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None,
            normalizer: Normalizer, augment_config: AugmentConfig | None = None,
            epoch: int = 0):
    """Deterministic batch iterator; the final short batch is kept.

    shuffle_seed None means sequential order (evaluation). Augmentation,
    when given, is applied before normalization with a seed derived from
    (shuffle_seed, epoch, step).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(
            np.random.PCG64([shuffle_seed, epoch])).permutation(n)
    for step, lo in enumerate(range(0, n, batch_size)):
        idx = order[lo : lo + batch_size]
        raw = dataset.images[idx]
        if augment_config is not None and shuffle_seed is not None:
            raw = augment(raw, augment_config, rng_seed=hash((shuffle_seed, epoch, step)) & 0x7FFFFFFF)
        yield Batch(images=normalizer(raw), labels=dataset.labels[idx].astype(np.int64),
                    epoch=epoch, step=step)
