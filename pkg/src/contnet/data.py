"""Image/label datasets: the ``CTDS`` binary format and a seeded synthetic generator.

File layout (little-endian)::

    b"CTDS"  u32 version=1  u32 count  u32 C  u32 H  u32 W
    f32 mean[C]  f32 std[C]
    u8  pixels[count * C * H * W]   (row-major, NCHW)
    u16 labels[count]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

MAGIC = b"CTDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class DatasetFormatError(ValueError):
    """The file is not a valid dataset (bad magic/version, truncation, bad labels)."""


@dataclass
class Dataset:
    """Raw u8 pixels with labels and the per-channel statistics used to normalise them."""

    pixels: np.ndarray  # (count, C, H, W) uint8
    labels: np.ndarray  # (count,) int64
    mean: np.ndarray  # (C,) float32, in [0, 1] pixel units
    std: np.ndarray  # (C,) float32
    class_count: int

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be (count, C, H, W), got {self.pixels.shape}")
        if len(self.labels) != len(self.pixels):
            raise ValueError("one label per image is required")
        if self.mean.shape != (self.pixels.shape[1],) or self.std.shape != self.mean.shape:
            raise ValueError("mean/std need one entry per channel")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetFormatError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return self.pixels.shape[1:]

    def images(self, dtype=np.float32, index=None) -> np.ndarray:
        """Normalised images ``(pixel / 255 - mean) / std``, optionally a subset."""
        px = self.pixels if index is None else self.pixels[index]
        c = self.pixels.shape[1]
        dtype = np.dtype(dtype)
        out = px.astype(dtype) / dtype.type(255.0)
        out -= self.mean.astype(dtype).reshape(1, c, 1, 1)
        out /= self.std.astype(dtype).reshape(1, c, 1, 1)
        return out


def channel_stats(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = pixels.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-3).astype(np.float32)


def synth_dataset(classes: int, count: int, size=(32, 32), seed: int = 0, channels: int = 3,
                  amplitude: float = 48.0, noise: float = 24.0) -> Dataset:
    """Separable toy data: a smooth class prototype image plus i.i.d. pixel noise.

    Prototypes are random 4x4 patterns upsampled to the image size; labels are
    balanced and shuffled. The same arguments always give the same bytes.
    """
    h, w = size
    if classes < 1 or count < 1:
        raise ValueError("classes and count must be positive")
    if classes > 65535:
        raise ValueError("labels are stored as u16")
    rng = np.random.default_rng(seed)
    coarse = rng.standard_normal((classes, channels, 4, 4))
    ry, rx = -(-h // 4), -(-w // 4)
    protos = np.repeat(np.repeat(coarse, ry, axis=2), rx, axis=3)[:, :, :h, :w]
    labels = rng.permutation(np.arange(count) % classes)
    pix = 128.0 + amplitude * protos[labels] + noise * rng.standard_normal((count, channels, h, w))
    pixels = np.clip(np.rint(pix), 0, 255).astype(np.uint8)
    mean, std = channel_stats(pixels)
    return Dataset(pixels, labels, mean, std, classes)


def write_dataset(path: Union[str, Path], ds: Dataset) -> None:
    count, c, h, w = ds.pixels.shape
    if len(ds.labels) and ds.labels.max() > 0xFFFF:
        raise ValueError("labels are stored as u16")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, count, c, h, w))
        fh.write(ds.mean.astype("<f4").tobytes())
        fh.write(ds.std.astype("<f4").tobytes())
        fh.write(ds.pixels.tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())


def read_dataset(path: Union[str, Path], class_count: Optional[int] = None) -> Dataset:
    """Parse and validate a ``CTDS`` file.

    ``class_count`` defaults to ``max(label) + 1``; when given, labels outside
    ``[0, class_count)`` are rejected.
    """
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, count, c, h, w = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    n_pix = count * c * h * w
    expected = _HEADER.size + 8 * c + n_pix + 2 * count
    if len(buf) < expected:
        raise DatasetFormatError(f"{path}: truncated, {len(buf)} of {expected} bytes")
    if len(buf) > expected:
        raise DatasetFormatError(f"{path}: {len(buf) - expected} trailing bytes")
    off = _HEADER.size
    mean = np.frombuffer(buf, "<f4", c, off)
    std = np.frombuffer(buf, "<f4", c, off + 4 * c)
    off += 8 * c
    pixels = np.frombuffer(buf, np.uint8, n_pix, off).reshape(count, c, h, w)
    labels = np.frombuffer(buf, "<u2", count, off + n_pix).astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if count else 0
    if count and labels.max() >= class_count:
        raise DatasetFormatError(f"{path}: label {int(labels.max())} out of range for {class_count} classes")
    return Dataset(pixels.copy(), labels, mean.copy(), std.copy(), class_count)


load_dataset = read_dataset
