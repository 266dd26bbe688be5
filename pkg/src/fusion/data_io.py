"""Embedding/dataset ingestion and the synthetic glyph generator.

Embeddings travel through a small binary format (see EMBEDDING_MAGIC below);
image data is held as channels-first float tensors in [0, 1].  The glyph
generator produces a deterministic, linearly separable stand-in for a real
handwritten-character corpus so the whole pipeline can run offline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .errors import (
    ConfigError,
    CorruptionError,
    EmptySetError,
    FormatError,
    ValidationError,
)

EMBEDDING_MAGIC = b"FUSEMB1"
_HEADER_LEN = len(EMBEDDING_MAGIC) + 1 + 8  # magic, reserved byte, u32 N, u32 D


@dataclass(frozen=True)
class EmbeddingSet:
    """An N x D matrix of feature vectors plus a provenance tag."""

    vectors: np.ndarray
    source_tag: str = ""

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float32))
        if v.ndim != 2:
            raise ValidationError(f"embedding matrix must be 2-D, got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ValidationError(f"embedding matrix must be at least 1x1, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValidationError("embedding matrix contains non-finite entries")
        object.__setattr__(self, "vectors", v)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class Dataset:
    """Images with integer class labels and a split tag.

    Labels are true class ids; training code only consumes them indirectly
    through pseudo-labels, while oracles and evaluation read them as-is.
    """

    images: torch.Tensor
    labels: torch.Tensor
    split_tag: str = "meta-train"

    def __post_init__(self):
        self.images = torch.as_tensor(self.images, dtype=torch.float32)
        self.labels = torch.as_tensor(self.labels, dtype=torch.int64)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be N,C,H,W; got shape {tuple(self.images.shape)}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise ValidationError("labels must be a vector with one entry per image")
        if self.images.numel() and (self.images.min() < 0 or self.images.max() > 1):
            raise ValidationError("pixel values must lie in [0, 1]")
        if self.labels.numel() == 0:
            raise ValidationError("dataset must contain at least one example")
        if self.labels.min() < 0:
            raise ValidationError("labels must be non-negative")
        counts = torch.bincount(self.labels, minlength=int(self.labels.max()) + 1)
        if (counts < 2).any():
            bad = torch.nonzero(counts < 2).flatten().tolist()
            raise ValidationError(f"every class needs >= 2 samples; offending class ids {bad}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def image_shape(self) -> tuple[int, int, int]:
        n, c, h, w = self.images.shape
        return (c, h, w)

    def class_indices(self, class_id: int) -> np.ndarray:
        return torch.nonzero(self.labels == class_id).flatten().numpy()

    def subset_by_classes(self, class_ids, split_tag=None, relabel=True) -> "Dataset":
        """Restrict to the given classes, optionally relabelling them 0..len-1."""
        class_ids = list(class_ids)
        mask = torch.zeros(len(self), dtype=torch.bool)
        for c in class_ids:
            mask |= self.labels == c
        images = self.images[mask]
        labels = self.labels[mask]
        if relabel:
            remap = {c: i for i, c in enumerate(class_ids)}
            labels = torch.tensor([remap[int(y)] for y in labels], dtype=torch.int64)
        return Dataset(images, labels, split_tag or self.split_tag)


@dataclass(frozen=True)
class LabeledExample:
    """One image with its (pseudo- or true) label."""

    x: torch.Tensor
    y: int

    def __post_init__(self):
        if self.y < 0:
            raise ValidationError(f"label must be non-negative, got {self.y}")


def store_embeddings(embeddings: EmbeddingSet, path) -> None:
    """Write an embedding set in the binary exchange format.

    Layout: 7-byte magic, one reserved zero byte, little-endian u32 row and
    column counts, then row-major little-endian float32 payload.
    """
    v = embeddings.vectors
    if not np.isfinite(v).all():
        raise ValidationError("refusing to store non-finite embedding values")
    n, d = v.shape
    payload = v.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(b"\x00")
        f.write(struct.pack("<II", n, d))
        f.write(payload)


def load_embeddings(path) -> EmbeddingSet:
    """Read an embedding set written by store_embeddings."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_LEN or raw[: len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: not an embedding file (bad magic)")
    n, d = struct.unpack_from("<II", raw, len(EMBEDDING_MAGIC) + 1)
    if n == 0 or d == 0:
        raise EmptySetError(f"{path}: header declares an empty {n}x{d} matrix")
    expected = _HEADER_LEN + 4 * n * d
    if len(raw) != expected:
        raise CorruptionError(
            f"{path}: expected {expected} bytes for a {n}x{d} matrix, found {len(raw)}"
        )
    vectors = np.frombuffer(raw, dtype="<f4", offset=_HEADER_LEN).reshape(n, d).copy()
    return EmbeddingSet(vectors, source_tag=str(path))


def _render_strokes(points: np.ndarray, size: int, thickness: float) -> np.ndarray:
    """Rasterize a polyline (coords in [0,1]^2) onto a size x size canvas."""
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    canvas = np.zeros((size, size), dtype=np.float64)
    for p0, p1 in zip(points[:-1], points[1:]):
        seg = p1 - p0
        seg_len2 = float(seg @ seg)
        if seg_len2 < 1e-12:
            continue
        t = ((xx - p0[0]) * seg[0] + (yy - p0[1]) * seg[1]) / seg_len2
        t = np.clip(t, 0.0, 1.0)
        dx = xx - (p0[0] + t * seg[0])
        dy = yy - (p0[1] + t * seg[1])
        dist = np.sqrt(dx * dx + dy * dy)
        # soft-edged stroke: full intensity inside the core, linear falloff outside
        ink = np.clip(1.0 - (dist - thickness) / thickness, 0.0, 1.0)
        canvas = np.maximum(canvas, ink)
    return canvas


def generate_synthetic_glyphs(
    num_classes: int,
    samples_per_class: int,
    image_size: int = 28,
    seed: int = 0,
) -> Dataset:
    """Render a deterministic glyph dataset.

    Each class is a random polyline glyph; each sample jitters the class
    glyph with a small rotation, translation and pixel noise.  The output
    is a pure function of the four arguments.
    """
    if image_size < 8:
        raise ConfigError(f"image_size must be >= 8, got {image_size}")
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if samples_per_class < 2:
        raise ConfigError(f"need at least 2 samples per class, got {samples_per_class}")

    thickness = 0.55 / image_size
    images = np.zeros((num_classes * samples_per_class, 1, image_size, image_size), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), samples_per_class)

    for c in range(num_classes):
        class_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, c])))
        n_points = int(class_rng.integers(4, 8))
        points = class_rng.uniform(0.18, 0.82, size=(n_points, 2))
        base = _render_strokes(points, image_size, thickness)
        for s in range(samples_per_class):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, c, s])))
            angle = rng.uniform(-10.0, 10.0)
            shift = rng.uniform(-2.0, 2.0, size=2)
            theta = np.deg2rad(angle)
            rot = np.array(
                [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
            )
            center = np.array([(image_size - 1) / 2.0] * 2)
            offset = center - rot @ center + shift
            img = ndimage.affine_transform(
                base, rot, offset=offset, order=1, mode="constant", cval=0.0
            )
            img = img + rng.normal(0.0, 0.05, size=img.shape)
            images[c * samples_per_class + s, 0] = np.clip(img, 0.0, 1.0)

    return Dataset(torch.from_numpy(images), torch.from_numpy(labels), "meta-train")


def embed_dataset_baseline(dataset: Dataset, dim: int = 64, seed: int = 0) -> EmbeddingSet:
    """Embed images by a fixed random projection plus per-dimension standardization.

    Stands in for a learned embedding network; labels are never consulted.
    """
    if dim < 2:
        raise ConfigError(f"embedding dim must be >= 2, got {dim}")
    flat = dataset.images.reshape(len(dataset), -1).numpy().astype(np.float64)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    projection = rng.normal(size=(flat.shape[1], dim)) / np.sqrt(flat.shape[1])
    z = flat @ projection
    mean = z.mean(axis=0)
    std = z.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    z = (z - mean) / std
    return EmbeddingSet(z.astype(np.float32), source_tag=f"pixel-projection-{dim}d-seed{seed}")


def load_image_folder(root, split_tag: str = "meta-train") -> Dataset:
    """Load a directory of per-class subdirectories of PNG images.

    Class ids follow the sorted subdirectory names; grayscale folders yield
    one channel, color folders three.  All images must share one size.
    """
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"{root}: not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValidationError(f"{root}: contains no class subdirectories")

    arrays, labels = [], []
    mode = None
    shape = None
    for label, class_dir in enumerate(class_dirs):
        files = sorted(class_dir.glob("*.png"))
        for fp in files:
            with Image.open(fp) as im:
                if mode is None:
                    mode = "L" if im.mode in ("L", "1", "I;16", "I") else "RGB"
                arr = np.asarray(im.convert(mode), dtype=np.float32) / 255.0
            if arr.ndim == 2:
                arr = arr[None, :, :]
            else:
                arr = arr.transpose(2, 0, 1)
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValidationError(f"{fp}: shape {arr.shape} differs from {shape}")
            arrays.append(arr)
            labels.append(label)
    if not arrays:
        raise ValidationError(f"{root}: no PNG files found")
    images = torch.from_numpy(np.stack(arrays))
    return Dataset(images, torch.tensor(labels, dtype=torch.int64), split_tag)
