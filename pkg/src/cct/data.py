"""CIFAR-100 binary ingestion, normalization, augmentation, batching, and
synthetic data for tests.

Record layout (official binary format): 3074 bytes = coarse label byte,
fine label byte, 3072 pixel bytes channel-planar (1024 red, 1024 green,
1024 blue), each plane row-major 32x32.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .seeding import stream
from .tensor import ConfigError, Tensor

RECORD_BYTES = 3074
PIXEL_BYTES = 3072
IMG_SHAPE = (3, 32, 32)
TRAIN_RECORDS = 50_000
TEST_RECORDS = 10_000
TRAIN_FILE = "train.bin"
TEST_FILE = "test.bin"


class DataError(ValueError):
    pass


@dataclass
class Cifar100Record:
    coarse_label: int
    fine_label: int
    pixels: np.ndarray  # uint8 (3072,), channel-planar

    def __post_init__(self):
        if not 0 <= self.coarse_label <= 19:
            raise DataError(f"coarse_label {self.coarse_label} outside [0, 19]")
        if not 0 <= self.fine_label <= 99:
            raise DataError(f"fine_label {self.fine_label} outside [0, 99]")
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (PIXEL_BYTES,):
            raise DataError(f"pixels must be {PIXEL_BYTES} bytes, "
                            f"got shape {self.pixels.shape}")

    def image(self) -> np.ndarray:
        return self.pixels.reshape(IMG_SHAPE)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # (3,), [0,1] scale
    std: np.ndarray   # (3,), > 0


@dataclass
class Batch:
    images: Tensor        # (B, 3, 32, 32) normalized float32
    labels: np.ndarray    # (B,) int64 fine labels


# ---------------------------------------------------------------------------
# loading / writing
# ---------------------------------------------------------------------------

def _parse_records(raw: bytes, origin: str):
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        raise DataError(f"{origin}: size {len(raw)} bytes is not a positive "
                        f"multiple of the {RECORD_BYTES}-byte record size")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    coarse, fine = arr[:, 0], arr[:, 1]
    if coarse.max() > 19:
        raise DataError(f"{origin}: coarse label {int(coarse.max())} outside [0, 19]")
    if fine.max() > 99:
        raise DataError(f"{origin}: fine label {int(fine.max())} outside [0, 99]")
    return [Cifar100Record(int(c), int(f), row[2:].copy())
            for c, f, row in zip(coarse, fine, arr)]


def load_records(path):
    """Parse one record file of any length (must be whole records)."""
    with open(path, "rb") as f:
        raw = f.read()
    return _parse_records(raw, os.fspath(path))


def load_cifar100(data_dir):
    """Load the official splits; sizes are checked byte-exactly."""
    out = {}
    for split, fname, n in (("train", TRAIN_FILE, TRAIN_RECORDS),
                            ("test", TEST_FILE, TEST_RECORDS)):
        path = os.path.join(os.fspath(data_dir), fname)
        if not os.path.exists(path):
            raise FileNotFoundError(f"expected dataset file {path}")
        expected = n * RECORD_BYTES
        actual = os.path.getsize(path)
        if actual != expected:
            raise DataError(f"{path}: expected {expected} bytes "
                            f"({n} records), got {actual}")
        out[split] = load_records(path)
    return out


def write_records(path, records) -> None:
    with open(path, "wb") as f:
        for r in records:
            f.write(bytes((r.coarse_label, r.fine_label)))
            f.write(r.pixels.tobytes())


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def compute_norm_stats(records) -> NormStats:
    """Per-channel mean/std of pixel values scaled to [0,1]; zero std is
    clamped to 1 so constant channels stay finite."""
    if not records:
        raise DataError("compute_norm_stats: no records")
    arr = np.stack([r.pixels for r in records]).reshape(len(records), 3, -1)
    mean = arr.mean(axis=(0, 2), dtype=np.float64) / 255.0
    std = arr.std(axis=(0, 2), dtype=np.float64) / 255.0
    std = np.where(std < 1e-8, 1.0, std)
    return NormStats(mean=mean, std=std)


def normalize(images, norm: NormStats):
    """(x/255 - mean) / std over (..., 3, 32, 32); uint8 in, float32 out
    (float inputs keep their dtype)."""
    x = np.asarray(images)
    dtype = np.float32 if x.dtype == np.uint8 else x.dtype
    x = x.astype(dtype)
    shape = (3, 1, 1)
    return (x / 255.0 - norm.mean.reshape(shape).astype(dtype)) \
        / norm.std.reshape(shape).astype(dtype)


def denormalize(images, norm: NormStats):
    x = np.asarray(images)
    shape = (3, 1, 1)
    return (x * norm.std.reshape(shape).astype(x.dtype)
            + norm.mean.reshape(shape).astype(x.dtype)) * 255.0


def save_norm_stats(path, norm: NormStats) -> None:
    with open(path, "w") as f:
        f.write("mean " + " ".join(repr(float(v)) for v in norm.mean) + "\n")
        f.write("std " + " ".join(repr(float(v)) for v in norm.std) + "\n")


def load_norm_stats(path) -> NormStats:
    vals = {}
    with open(path) as f:
        for line in f:
            key, *nums = line.split()
            vals[key] = np.array([float(v) for v in nums], dtype=np.float64)
    if set(vals) != {"mean", "std"} or vals["mean"].shape != (3,) or vals["std"].shape != (3,):
        raise DataError(f"{path}: malformed normalization stats")
    return NormStats(mean=vals["mean"], std=vals["std"])


def cached_norm_stats(records, cache_path) -> NormStats:
    """Load stats from cache_path if present, else compute and try to cache."""
    if cache_path is not None and os.path.exists(cache_path):
        return load_norm_stats(cache_path)
    norm = compute_norm_stats(records)
    if cache_path is not None:
        try:
            save_norm_stats(cache_path, norm)
        except OSError:
            pass  # read-only data dir: stats are cheap to recompute
    return norm


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1]


def reflect_crop(image: np.ndarray, oy: int, ox: int) -> np.ndarray:
    """Reflect-pad 4 then take the 32x32 window at (oy, ox); (4,4) is the
    identity crop."""
    padded = np.pad(image, ((0, 0), (4, 4), (4, 4)), mode="reflect")
    return padded[:, oy:oy + 32, ox:ox + 32]


def augment(image: np.ndarray, seed, enabled: bool) -> np.ndarray:
    """Random crop from reflect-pad 4 plus 50% horizontal flip."""
    if not enabled:
        return image
    rng = np.random.default_rng(seed)
    oy, ox = rng.integers(0, 9, size=2)
    out = reflect_crop(image, int(oy), int(ox))
    if rng.random() < 0.5:
        out = hflip(out)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batch_iter(records, batch_size: int, shuffle_seed: int, norm: NormStats,
               augment_enabled: bool, epoch: int = 0):
    """Deterministic epoch stream; order is a pure function of
    (shuffle_seed, epoch), augmentation of (shuffle_seed, epoch, index)."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(records)
    perm = stream("shuffle", shuffle_seed, epoch).permutation(n)
    for start in range(0, n, batch_size):
        idxs = perm[start:start + batch_size]
        imgs = np.empty((len(idxs), *IMG_SHAPE), dtype=np.uint8)
        for row, i in enumerate(idxs):
            img = records[i].image()
            if augment_enabled:
                img = augment(img, stream("augment", shuffle_seed, epoch, int(i)),
                              enabled=True)
            imgs[row] = img
        labels = np.array([records[i].fine_label for i in idxs], dtype=np.int64)
        yield Batch(images=Tensor(normalize(imgs, norm)), labels=labels)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _class_palette(n_classes: int) -> np.ndarray:
    # distinct mean colors on a lattice inside the RGB cube
    levels = 1
    while levels ** 3 < n_classes:
        levels += 1
    axis = np.linspace(30.0, 225.0, levels)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)[:n_classes]


def synthetic_dataset(n: int, n_classes: int, seed: int):
    """Class-conditional color-blob images in real record format: per-class
    mean color plus pixel noise. Learnable by a tiny model, deterministic."""
    if n < 1:
        raise DataError(f"synthetic_dataset: n must be >= 1, got {n}")
    if not 1 <= n_classes <= 100:
        raise DataError(f"synthetic_dataset: n_classes must be in [1, 100], "
                        f"got {n_classes}")
    rng = stream("synthetic", seed)
    palette = _class_palette(n_classes)
    fine = np.arange(n) % n_classes
    rng.shuffle(fine)
    noise = rng.normal(0.0, 20.0, size=(n, 3, 1024))
    base = palette[fine][:, :, None]  # (n, 3, 1)
    pixels = np.clip(base + noise, 0, 255).astype(np.uint8).reshape(n, PIXEL_BYTES)
    return [Cifar100Record(int(f) // 5, int(f), px) for f, px in zip(fine, pixels)]
