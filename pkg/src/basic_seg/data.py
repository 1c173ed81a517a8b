"""Synthetic class-imbalanced segmentation data and its binary container.

Each sample is a single-channel image holding ``K`` non-overlapping
axis-aligned ellipses whose expected areas shrink geometrically, so the
largest foreground class outweighs the smallest by roughly
``area_ratio ** (K - 1)``.

Container layout (little-endian)::

    b"SEGD" | u32 version | u32 samples | u32 H | u32 W
            | u32 num_classes | u32 num_subclasses (0 = no subclass maps)
    per sample: f64[H*W] image | u16[H*W] labels | u16[H*W] subclass labels?
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONTAINER_MAGIC = b"SEGD"
CONTAINER_VERSION = 1


class PlacementError(RuntimeError):
    def __init__(self, class_id: int, attempts: int):
        self.class_id = class_id
        super().__init__(f"could not place class {class_id} after {attempts} attempts")


@dataclass
class SynthSpec:
    height: int = 32
    width: int = 32
    num_classes: int = 5
    area_ratio: float = 3.0
    largest_area_fraction: float = 0.25
    intensities: tuple[float, ...] | None = None
    background_intensity: float = 0.0
    noise_sigma: float = 0.1
    samples: int = 10
    seed: int = 0
    max_attempts: int = 100
    max_layouts: int = 20

    def class_intensities(self) -> np.ndarray:
        if self.intensities is not None:
            if len(self.intensities) != self.num_classes:
                raise ValueError("need one intensity per foreground class")
            return np.asarray(self.intensities, dtype=np.float64)
        return np.linspace(0.3, 1.0, self.num_classes)

    def expected_areas(self) -> np.ndarray:
        top = self.largest_area_fraction * self.height * self.width
        return top / self.area_ratio ** np.arange(self.num_classes)


@dataclass
class Dataset:
    images: np.ndarray  # S x H x W float64
    labels: np.ndarray  # S x H x W int64
    num_classes: int  # including background
    sub_labels: np.ndarray | None = None
    num_subclasses: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        sub = None if self.sub_labels is None else self.sub_labels[idx]
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, sub, self.num_subclasses)

    def class_pixel_counts(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.num_classes)


def _ellipse_mask(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0


def _sample_labels(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Place classes largest first; restart the whole layout when one gets stuck."""
    for _ in range(spec.max_layouts - 1):
        try:
            return _try_layout(spec, rng)
        except PlacementError:
            pass
    return _try_layout(spec, rng)


def _try_layout(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.int64)
    for cls, area in enumerate(spec.expected_areas(), start=1):
        for _ in range(spec.max_attempts):
            a = area * rng.uniform(0.8, 1.2)
            aspect = rng.uniform(0.6, 1.6)
            ry = np.sqrt(a * aspect / np.pi)
            rx = np.sqrt(a / (aspect * np.pi))
            if 2 * ry + 2 > h or 2 * rx + 2 > w:
                continue
            cy = rng.uniform(ry + 1, h - ry - 1)
            cx = rng.uniform(rx + 1, w - rx - 1)
            mask = _ellipse_mask(h, w, cy, cx, ry, rx)
            mask[int(cy), int(cx)] = True
            # one-pixel margin keeps organs from touching
            grown = mask.copy()
            grown[1:] |= mask[:-1]
            grown[:-1] |= mask[1:]
            grown[:, 1:] |= mask[:, :-1]
            grown[:, :-1] |= mask[:, 1:]
            if np.any(labels[grown] != 0):
                continue
            labels[mask] = cls
            break
        else:
            raise PlacementError(cls, spec.max_attempts)
    return labels


def generate(spec: SynthSpec) -> Dataset:
    """Draw ``spec.samples`` images; sample ``i`` depends only on (seed, i)."""
    means = np.concatenate([[spec.background_intensity], spec.class_intensities()])
    images, labels = [], []
    for i in range(spec.samples):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i]))
        lab = _sample_labels(spec, rng)
        img = means[lab]
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
        images.append(img)
        labels.append(lab)
    return Dataset(
        np.stack(images) if images else np.zeros((0, spec.height, spec.width)),
        np.stack(labels) if labels else np.zeros((0, spec.height, spec.width), dtype=np.int64),
        spec.num_classes + 1,
    )


def imbalance_ratio(labels: np.ndarray, num_classes: int) -> float:
    """Largest over smallest foreground pixel count."""
    counts = np.bincount(np.asarray(labels).ravel(), minlength=num_classes)[1:].astype(float)
    return float(counts.max() / max(counts.min(), 1.0))


# ---------------------------------------------------------------- container


def write_container(path, ds: Dataset) -> None:
    s, h, w = ds.images.shape
    has_sub = ds.sub_labels is not None
    if ds.labels.shape != (s, h, w) or (has_sub and ds.sub_labels.shape != (s, h, w)):
        raise ValueError("image/label shapes disagree")
    if ds.labels.size and (ds.labels.min() < 0 or ds.labels.max() >= ds.num_classes):
        raise ValueError("labels outside the declared class range")
    if has_sub and ds.sub_labels.size and (ds.sub_labels.min() < 0 or ds.sub_labels.max() >= ds.num_subclasses):
        raise ValueError("subclass labels outside the declared range")
    parts = [
        CONTAINER_MAGIC,
        struct.pack("<6I", CONTAINER_VERSION, s, h, w, ds.num_classes, ds.num_subclasses if has_sub else 0),
    ]
    for i in range(s):
        parts.append(np.ascontiguousarray(ds.images[i], dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(ds.labels[i], dtype="<u2").tobytes())
        if has_sub:
            parts.append(np.ascontiguousarray(ds.sub_labels[i], dtype="<u2").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_container(path) -> Dataset:
    blob = Path(path).read_bytes()
    if blob[:4] != CONTAINER_MAGIC:
        raise ValueError(f"{path}: malformed container (bad magic)")
    if len(blob) < 28:
        raise ValueError(f"{path}: malformed container (truncated header)")
    version, s, h, w, nc, nsub = struct.unpack_from("<6I", blob, 4)
    if version != CONTAINER_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    px = h * w
    per = 8 * px + 2 * px + (2 * px if nsub else 0)
    if len(blob) != 28 + s * per:
        raise ValueError(f"{path}: malformed container (size mismatch)")
    images = np.empty((s, h, w))
    labels = np.empty((s, h, w), dtype=np.int64)
    subs = np.empty((s, h, w), dtype=np.int64) if nsub else None
    pos = 28
    for i in range(s):
        images[i] = np.frombuffer(blob, "<f8", px, pos).reshape(h, w)
        pos += 8 * px
        labels[i] = np.frombuffer(blob, "<u2", px, pos).reshape(h, w)
        pos += 2 * px
        if nsub:
            subs[i] = np.frombuffer(blob, "<u2", px, pos).reshape(h, w)
            pos += 2 * px
    ds = Dataset(images, labels, nc, subs, nsub)
    if labels.size and labels.max() >= nc:
        raise ValueError(f"{path}: labels outside the declared class range")
    return ds
