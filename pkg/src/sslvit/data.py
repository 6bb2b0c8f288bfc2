"""Dataset and embedding persistence plus the synthetic image generator.

File formats (all little-endian, written atomically via temp-file rename):

  dataset   magic "SVDS", u32 version=1, u64 manifest length, manifest JSON
            (classes, image_shape, per-sample records with byte offsets),
            then raw u8 image planes in sample order.
  embeddings magic "SSLE", u32 version=1, u64 N, u32 dim, N*dim f32 features
            row-major, then N u32 labels.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadMagicError, ConfigError, FormatError, ShapeError,
                     TruncatedFileError, VersionError)
from .vit import _bilinear_matrix

DATASET_MAGIC = b"SVDS"
DATASET_VERSION = 1
EMBED_MAGIC = b"SSLE"
EMBED_VERSION = 1


@dataclass
class Dataset:
    classes: list[int]
    images: np.ndarray  # (N, channels, H, W) uint8
    labels: np.ndarray  # (N,) int64, values drawn from `classes`

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"Dataset images must be (N, C, H, W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")
        known = set(self.classes)
        stray = set(np.unique(self.labels)) - known if len(self.labels) else set()
        if stray:
            raise ConfigError(f"labels reference classes not in the class list: {sorted(stray)}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def image_float(self, i: int) -> np.ndarray:
        return self.images[i].astype(np.float64) / 255.0

    def images_float(self) -> list[np.ndarray]:
        return [self.image_float(i) for i in range(len(self))]


def write_dataset(dataset: Dataset, path: str) -> None:
    c, h, w = dataset.image_shape
    stride = c * h * w
    manifest = {
        "classes": [int(x) for x in dataset.classes],
        "image_shape": [int(c), int(h), int(w)],
        "samples": [{"id": i, "class_id": int(dataset.labels[i]), "offset": i * stride}
                    for i in range(len(dataset))],
    }
    blob = json.dumps(manifest).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(dataset.images.tobytes())
    os.replace(tmp, path)


def _read_exact(f, n: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise TruncatedFileError(f"truncated {what}: wanted {n} bytes, got {len(raw)}")
    return raw


def read_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise BadMagicError(f"{path}: expected magic {DATASET_MAGIC!r}, got {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != DATASET_VERSION:
            raise VersionError(f"{path}: unsupported dataset version {version}")
        (mlen,) = struct.unpack("<Q", _read_exact(f, 8, "manifest length"))
        try:
            manifest = json.loads(_read_exact(f, mlen, "manifest").decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise FormatError(f"{path}: bad manifest: {e}") from None
        c, h, w = manifest["image_shape"]
        stride = c * h * w
        samples = manifest["samples"]
        blob = f.read()
        if len(blob) < stride * len(samples):
            raise TruncatedFileError(
                f"{path}: image payload has {len(blob)} bytes, need {stride * len(samples)}")
        if len(blob) > stride * len(samples):
            raise FormatError(f"{path}: {len(blob) - stride * len(samples)} trailing bytes")
        images = np.empty((len(samples), c, h, w), dtype=np.uint8)
        labels = np.empty(len(samples), dtype=np.int64)
        for i, rec in enumerate(samples):
            off = rec["offset"]
            images[i] = np.frombuffer(blob[off:off + stride], dtype=np.uint8).reshape(c, h, w)
            labels[i] = rec["class_id"]
    return Dataset(classes=list(manifest["classes"]), images=images, labels=labels)


# ---------------------------------------------------------------------------
# synthetic class-conditional generator
# ---------------------------------------------------------------------------

def synth_templates(num_classes: int, image_size: int, seed: int,
                    channels: int = 1) -> np.ndarray:
    """One smooth low-frequency pattern per class, float in [0, 1]."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    base_grid = max(2, image_size // 8)
    up = _bilinear_matrix(base_grid, image_size)  # (image_size^2, base_grid^2)
    templates = np.empty((num_classes, channels, image_size, image_size))
    for cls in range(num_classes):
        for ch in range(channels):
            coarse = rng.standard_normal(base_grid * base_grid)
            img = (up @ coarse).reshape(image_size, image_size)
            img = (img - img.mean()) / max(img.std(), 1e-9)
            templates[cls, ch] = np.clip(0.5 + 0.15 * img, 0.05, 0.95)
    return templates


def synth_dataset(num_classes: int, per_class: int, image_size: int, seed: int,
                  channels: int = 1, noise_sigma: float = 0.1,
                  max_shift: int = 2) -> Dataset:
    """Class templates plus per-sample noise and random circular translation,
    quantized to u8. Deterministic per seed."""
    if num_classes < 1 or per_class < 1 or image_size < 1:
        raise ConfigError("synth_dataset: all counts must be >= 1")
    templates = synth_templates(num_classes, image_size, seed, channels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    n = num_classes * per_class
    images = np.empty((n, channels, image_size, image_size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for cls in range(num_classes):
        for _ in range(per_class):
            dy = int(rng.integers(-max_shift, max_shift + 1))
            dx = int(rng.integers(-max_shift, max_shift + 1))
            sample = np.roll(templates[cls], (dy, dx), axis=(1, 2))
            sample = sample + noise_sigma * rng.standard_normal(sample.shape)
            images[i] = np.clip(np.round(sample * 255.0), 0, 255).astype(np.uint8)
            labels[i] = cls
            i += 1
    return Dataset(classes=list(range(num_classes)), images=images, labels=labels)


def split_classes(dataset: Dataset, fractions: list[float] | None = None,
                  class_lists: list[list[int]] | None = None) -> list[Dataset]:
    """Partition a dataset into class-disjoint subsets."""
    if (fractions is None) == (class_lists is None):
        raise ConfigError("split_classes: give exactly one of fractions or class_lists")
    classes = sorted(dataset.classes)
    if fractions is not None:
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split_classes: fractions sum to {sum(fractions)}, not 1")
        bounds = [int(round(f * len(classes))) for f in np.cumsum(fractions)]
        bounds[-1] = len(classes)
        groups, start = [], 0
        for b in bounds:
            groups.append(classes[start:b])
            start = b
    else:
        seen: set[int] = set()
        for lst in class_lists:
            overlap = seen & set(lst)
            if overlap:
                raise ConfigError(f"split_classes: classes {sorted(overlap)} appear in "
                                  "multiple lists")
            seen |= set(lst)
        if seen != set(classes):
            raise ConfigError("split_classes: class lists do not partition the class set")
        groups = [list(lst) for lst in class_lists]

    out = []
    for group in groups:
        mask = np.isin(dataset.labels, group)
        out.append(Dataset(classes=list(group), images=dataset.images[mask],
                           labels=dataset.labels[mask]))
    return out


# ---------------------------------------------------------------------------
# embedding store
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingStore:
    features: np.ndarray  # (N, dim) float64, canonicalized to f32 precision
    labels: np.ndarray    # (N,) int64 within u32 range
    dim: int = field(init=False)

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise ShapeError(f"EmbeddingStore features must be 2-D, got shape {f.shape}")
        # disk format is f32; canonicalize now so write->read round-trips bit-exactly
        self.features = f.astype("<f4").astype(np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.features):
            raise ShapeError(f"{len(self.features)} rows but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() > 0xFFFFFFFF):
            raise ConfigError("labels must fit in u32")
        self.dim = self.features.shape[1]

    def __len__(self) -> int:
        return len(self.features)


def write_embeddings(store: EmbeddingStore, path: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(EMBED_MAGIC)
        f.write(struct.pack("<I", EMBED_VERSION))
        f.write(struct.pack("<Q", len(store)))
        f.write(struct.pack("<I", store.dim))
        f.write(store.features.astype("<f4").tobytes())
        f.write(store.labels.astype("<u4").tobytes())
    os.replace(tmp, path)


def read_embeddings(path: str) -> EmbeddingStore:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != EMBED_MAGIC:
            raise BadMagicError(f"{path}: expected magic {EMBED_MAGIC!r}, got {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != EMBED_VERSION:
            raise VersionError(f"{path}: unsupported embedding-store version {version}")
        (n,) = struct.unpack("<Q", _read_exact(f, 8, "row count"))
        (dim,) = struct.unpack("<I", _read_exact(f, 4, "dim"))
        feats = np.frombuffer(_read_exact(f, n * dim * 4, "features"), dtype="<f4")
        labels = np.frombuffer(_read_exact(f, n * 4, "labels"), dtype="<u4")
        trailing = f.read()
        if trailing:
            raise FormatError(f"{path}: {len(trailing)} trailing bytes")
    return EmbeddingStore(features=feats.reshape(n, dim).astype(np.float64),
                          labels=labels.astype(np.int64))
