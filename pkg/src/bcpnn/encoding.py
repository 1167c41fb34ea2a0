"""Dataset ingestion (IDX, raw grayscale + CSV labels) and input coding."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    CountMismatch,
    DatasetError,
    DatasetNotFound,
    DomainError,
    LabelError,
    TruncatedData,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, height, width) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    width: int
    height: int
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images vs {len(self.labels)} labels")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def subset(self, n: int | None = None, start: int = 0) -> "Dataset":
        stop = None if n is None else start + n
        return Dataset(
            self.images[start:stop].copy(),
            self.labels[start:stop].copy(),
            self.width,
            self.height,
            self.n_classes,
            self.split,
        )


def _read(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise DatasetNotFound(f"dataset not found: {p}")
    return p.read_bytes()


def load_idx(images_path, labels_path, n_classes: int = 10, split: str = "train") -> Dataset:
    """Read an IDX image file (magic 0x803) and label file (magic 0x801)."""
    img = _read(images_path)
    lab = _read(labels_path)
    for path, data, want, head in ((images_path, img, IDX_IMAGES_MAGIC, 16), (labels_path, lab, IDX_LABELS_MAGIC, 8)):
        if len(data) >= 4 and int.from_bytes(data[:4], "big") != want:
            got = int.from_bytes(data[:4], "big")
            raise BadMagic(f"{path}: bad magic 0x{got:08x}, expected 0x{want:08x}")
        if len(data) < head:
            raise TruncatedData(f"{path}: header truncated")

    _, n, rows, cols = np.frombuffer(img[:16], dtype=">u4")
    _, ln = np.frombuffer(lab[:8], dtype=">u4")
    n, rows, cols, ln = int(n), int(rows), int(cols), int(ln)
    if n != ln:
        raise CountMismatch(f"image file holds {n} items but label file holds {ln}")
    if len(img) < 16 + n * rows * cols:
        raise TruncatedData(f"{images_path}: expected {n * rows * cols} pixel bytes, found {len(img) - 16}")
    if len(lab) < 8 + n:
        raise TruncatedData(f"{labels_path}: expected {n} label bytes, found {len(lab) - 8}")

    pixels = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)
    images = pixels.reshape(n, rows, cols) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    if labels.size and labels.max() >= n_classes:
        raise LabelError(f"label {labels.max()} out of range for {n_classes} classes")
    return Dataset(images, labels, cols, rows, n_classes, split)


def load_raw_gray(images_path, labels_path, width: int, height: int, n_classes: int = 2, split: str = "train") -> Dataset:
    """Headerless row-major uint8 images plus ``index,label`` CSV lines."""
    img = _read(images_path)
    frame = width * height
    if frame <= 0 or len(img) % frame:
        raise TruncatedData(f"{images_path}: length {len(img)} is not a multiple of {width}x{height}")
    n = len(img) // frame
    text = _read(labels_path).decode("ascii", errors="replace")

    labels = np.full(n, -1, dtype=np.int64)
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise LabelError(f"{labels_path}:{lineno}: expected 'index,label'")
        try:
            idx, lab = int(parts[0]), int(parts[1])
        except ValueError:
            raise LabelError(f"{labels_path}:{lineno}: non-numeric field in {line!r}") from None
        if not 0 <= lab < n_classes:
            raise LabelError(f"{labels_path}:{lineno}: label {lab} out of range")
        if not 0 <= idx < n:
            raise CountMismatch(f"{labels_path}:{lineno}: index {idx} but only {n} images")
        labels[idx] = lab
    missing = np.flatnonzero(labels < 0)
    if missing.size:
        raise CountMismatch(f"{labels_path}: no label for {missing.size} of {n} images (first: {missing[0]})")

    images = np.frombuffer(img, dtype=np.uint8).reshape(n, height, width) / 255.0
    return Dataset(images, labels, width, height, n_classes, split)


def complementary_encode(image) -> np.ndarray:
    """Pixel v -> MCU pair (1 - v, v). Returns a flat vector of length 2 * n_pixels."""
    v = np.asarray(image, dtype=np.float64).ravel()
    if v.size and (np.isnan(v).any() or v.min() < 0.0 or v.max() > 1.0):
        raise DomainError("pixel values must lie in [0, 1]")
    out = np.empty(2 * v.size)
    out[0::2] = 1.0 - v
    out[1::2] = v
    return out


__all__ = [
    "Dataset",
    "DatasetError",
    "load_idx",
    "load_raw_gray",
    "complementary_encode",
]
