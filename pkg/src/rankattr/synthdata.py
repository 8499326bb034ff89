"""Planted-feature images with known ground-truth importance.

Each image is a flat grey background (0.5 plus clipped Gaussian noise) with a
class-specific glyph stamped at a uniformly random position.  The glyph is the
only class signal, and its pixels form the ground-truth mask.

Dataset file layout (little-endian)::

    magic     4 bytes  b"RKDS"
    version   uint16   1
    height    uint16
    width     uint16
    classes   uint16
    count     uint32
    per sample:
        label  uint8
        image  float64[height*width]  raster order
        mask   ceil(height*width/8) bytes, np.packbits order (MSB first)
    crc32     uint32   over every preceding byte

Images are written as binary PGM (P5, 8-bit); heatmaps as binary PPM (P6)
using a linear blue-to-red ramp over the min-max normalised map.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "PlantedSample",
    "DatasetConfig",
    "DatasetFormatError",
    "DEFAULT_GLYPHS",
    "PLUS_MARKER",
    "generate",
    "inject_shortcut",
    "stack",
    "save_dataset",
    "load_dataset",
    "dataset_bytes",
    "write_image",
    "write_heatmap",
    "heatmap_rgb",
]

BACKGROUND = 0.5

# (shape, intensity); the first four are the default classes.
DEFAULT_GLYPHS = (
    (np.ones((4, 4)), 1.0),
    (np.ones((4, 4)), 0.8),
    (np.ones((4, 4)), 0.2),
    (np.ones((4, 4)), 0.0),
    (np.ones((2, 4)), 1.0),
    (np.ones((4, 2)), 0.0),
    (np.array([[1, 0, 1], [0, 1, 0], [1, 0, 1]], float), 1.0),
    (np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]], float), 0.0),
)

PLUS_MARKER = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.float64)

_MAGIC = b"RKDS"
_VERSION = 1


class DatasetFormatError(ValueError):
    """The dataset file is truncated, corrupt or of an unknown version."""


@dataclass
class PlantedSample:
    image: np.ndarray
    label: int
    truth_mask: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, PlantedSample):
            return NotImplemented
        return (
            self.label == other.label
            and self.image.tobytes() == other.image.tobytes()
            and self.truth_mask.tobytes() == other.truth_mask.tobytes()
        )


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 4
    samples_per_class: int = 512
    noise_std: float = 0.01
    height: int = 16
    width: int = 16
    seed: int = 0
    glyphs: tuple = field(default=None, compare=False)

    def resolved_glyphs(self) -> tuple:
        glyphs = self.glyphs if self.glyphs is not None else DEFAULT_GLYPHS[: self.num_classes]
        return tuple((np.asarray(g, dtype=np.float64), float(v)) for g, v in glyphs)

    def validate(self) -> "DatasetConfig":
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.glyphs is None and self.num_classes > len(DEFAULT_GLYPHS):
            raise ValueError(f"only {len(DEFAULT_GLYPHS)} default glyphs; pass glyphs explicitly")
        if self.samples_per_class < 0:
            raise ValueError("samples_per_class must be nonnegative")
        if not 0 <= self.noise_std < 0.2:
            raise ValueError("noise_std must lie in [0, 0.2)")
        glyphs = self.resolved_glyphs()
        if len(glyphs) != self.num_classes:
            raise ValueError("one glyph per class is required")
        seen = set()
        for g, v in glyphs:
            if g.shape[0] > self.height or g.shape[1] > self.width:
                raise ValueError(f"glyph {g.shape} larger than image {self.height}x{self.width}")
            if not 4 <= int(g.sum()) <= 16:
                raise ValueError("glyphs must cover 4 to 16 pixels")
            if abs(v - BACKGROUND) < 0.3 - 1e-12 or not 0.0 <= v <= 1.0:
                raise ValueError("glyph intensity must be in [0, 1] and differ from 0.5 by >= 0.3")
            key = (g.shape, g.tobytes(), v)
            if key in seen:
                raise ValueError("glyphs must be pairwise distinct")
            seen.add(key)
        return self


def generate(cfg: DatasetConfig) -> list:
    """Class-balanced, shuffled planted-glyph samples; deterministic in cfg.seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    H, W = cfg.height, cfg.width
    out = []
    for label, (glyph, value) in enumerate(cfg.resolved_glyphs()):
        gh, gw = glyph.shape
        for _ in range(cfg.samples_per_class):
            img = np.clip(BACKGROUND + rng.normal(0.0, cfg.noise_std, (H, W)), 0.0, 1.0)
            y = int(rng.integers(0, H - gh + 1))
            x = int(rng.integers(0, W - gw + 1))
            mask = np.zeros((H, W))
            mask[y : y + gh, x : x + gw] = glyph
            img[mask == 1] = value
            out.append(PlantedSample(img, label, mask))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def inject_shortcut(
    samples: Sequence[PlantedSample],
    class_id: int,
    marker: np.ndarray = PLUS_MARKER,
    policy: str = "uniform",
    seed: int = 0,
    return_masks: bool = False,
):
    """Stamp ``marker`` (intensity 1.0) onto every sample of ``class_id``.

    ``policy`` is ``"uniform"`` (random position per sample) or
    ``"fixed-corner"`` (top-left).  Truth masks are left alone since the
    marker is a confound.  Other samples are returned unchanged.  With
    ``return_masks`` the marker footprints (``None`` for untouched samples)
    come back as a second list.
    """
    marker = np.asarray(marker, dtype=np.float64)
    if not any(s.label == class_id for s in samples):
        raise ValueError(f"class {class_id} does not occur in the samples")
    if policy not in ("uniform", "fixed-corner"):
        raise ValueError("policy must be 'uniform' or 'fixed-corner'")
    rng = np.random.default_rng(seed)
    out, masks = [], []
    for s in samples:
        if s.label != class_id:
            out.append(s)
            masks.append(None)
            continue
        H, W = s.image.shape
        mh, mw = marker.shape
        if mh > H or mw > W:
            raise ValueError("marker does not fit the image")
        if policy == "uniform":
            y, x = int(rng.integers(0, H - mh + 1)), int(rng.integers(0, W - mw + 1))
        else:
            y, x = 0, 0
        footprint = np.zeros((H, W))
        footprint[y : y + mh, x : x + mw] = marker
        img = s.image.copy()
        img[footprint == 1] = 1.0
        out.append(replace(s, image=img))
        masks.append(footprint)
    return (out, masks) if return_masks else out


def stack(samples: Sequence[PlantedSample]):
    """(images, labels, masks) arrays."""
    if not samples:
        return np.zeros((0, 0, 0)), np.zeros(0, dtype=np.intp), np.zeros((0, 0, 0))
    return (
        np.stack([s.image for s in samples]),
        np.array([s.label for s in samples], dtype=np.intp),
        np.stack([s.truth_mask for s in samples]),
    )


# ----------------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------------


def dataset_bytes(samples: Sequence[PlantedSample], num_classes: int | None = None) -> bytes:
    if samples:
        H, W = samples[0].image.shape
    else:
        H = W = 0
    if num_classes is None:
        num_classes = max((s.label for s in samples), default=-1) + 1
    parts = [_MAGIC, struct.pack("<HHHHI", _VERSION, H, W, num_classes, len(samples))]
    for s in samples:
        if s.image.shape != (H, W):
            raise ValueError("all images must share one shape")
        if not 0 <= s.label < 256:
            raise ValueError("labels must fit in one byte")
        parts.append(struct.pack("<B", s.label))
        parts.append(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
        parts.append(np.packbits(s.truth_mask.reshape(-1) != 0).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_dataset(samples: Sequence[PlantedSample], path, num_classes: int | None = None) -> None:
    Path(path).write_bytes(dataset_bytes(samples, num_classes))


def load_dataset(path, return_classes: bool = False):
    raw = Path(path).read_bytes()
    head = 4 + struct.calcsize("<HHHHI")
    if len(raw) < head + 4 or raw[:4] != _MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file or truncated header")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise DatasetFormatError(f"{path}: CRC mismatch (file truncated or corrupt)")
    version, H, W, C, count = struct.unpack("<HHHHI", raw[4:head])
    if version != _VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    N = H * W
    mask_len = (N + 7) // 8
    rec = 1 + 8 * N + mask_len
    if len(body) != head + count * rec:
        raise DatasetFormatError(f"{path}: size does not match the header")
    samples = []
    pos = head
    for _ in range(count):
        label = body[pos]
        img = np.frombuffer(body, dtype="<f8", count=N, offset=pos + 1).astype(np.float64).reshape(H, W)
        bits = np.frombuffer(body, dtype=np.uint8, count=mask_len, offset=pos + 1 + 8 * N)
        mask = np.unpackbits(bits)[:N].astype(np.float64).reshape(H, W)
        samples.append(PlantedSample(img, int(label), mask))
        pos += rec
    return (samples, C) if return_classes else samples


# ----------------------------------------------------------------------------
# Portable any-map output
# ----------------------------------------------------------------------------


def _to_byte(v: np.ndarray) -> np.ndarray:
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def write_image(I, path) -> None:
    """8-bit binary PGM of an image with values in [0, 1]."""
    I = np.asarray(I, dtype=np.float64)
    if I.ndim != 2:
        raise ValueError("image must be 2-D")
    if not np.isfinite(I).all() or (I < 0).any() or (I > 1).any():
        raise ValueError("image values must lie in [0, 1]")
    H, W = I.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode("ascii") + _to_byte(I).tobytes())


def heatmap_rgb(A) -> np.ndarray:
    """(H, W, 3) uint8 colours: blue at the minimum, red at the maximum.

    A constant map normalises to 0.5 everywhere, i.e. the mid colour.
    """
    A = np.asarray(A, dtype=np.float64)
    if not np.isfinite(A).all():
        raise ValueError("attribution map must be finite")
    lo, hi = A.min(), A.max()
    v = np.full_like(A, 0.5) if hi == lo else (A - lo) / (hi - lo)
    return np.stack([_to_byte(v), np.zeros_like(v, dtype=np.uint8), _to_byte(1.0 - v)], axis=-1)


def write_heatmap(A, path) -> None:
    rgb = heatmap_rgb(A)
    H, W = rgb.shape[:2]
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode("ascii") + rgb.tobytes())
