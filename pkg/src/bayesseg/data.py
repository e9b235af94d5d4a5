"""Synthetic layered images, boundary/mask conversion, augmentation and block noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tensor import RngStream

TEXTURE_SIGMA = 0.05
MAX_ROTATION_DEG = 15.0


@dataclass
class LabeledSample:
    image: np.ndarray  # float32 [H,W] in [0,1]
    mask: np.ndarray  # int64 [H,W] in 0..C-1

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ in shape")


@dataclass
class BoundarySet:
    """Row coordinate of each of the C-1 boundaries for every column, top to bottom."""

    rows: np.ndarray  # float64 [C-1, W]
    valid: np.ndarray = field(default=None)  # bool [C-1, W]

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim == 1:
            self.rows = self.rows[:, None]
        if self.valid is None:
            self.valid = np.ones(self.rows.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def num_classes(self) -> int:
        return self.rows.shape[0] + 1


@dataclass
class NoiseSpec:
    level: int
    base_count: int = 2
    block_size: int = 8
    seed: int = 0

    @property
    def count(self) -> int:
        if self.level < 0:
            raise ValueError(f"noise level must be >= 0, got {self.level}")
        return 0 if self.level == 0 else self.base_count * 2 ** (self.level - 1)


def layer_palette(num_classes: int) -> np.ndarray:
    """Distinct base intensities, interleaved so that neighbouring layers contrast."""
    levels = np.linspace(0.1, 0.9, num_classes)
    order = []
    lo, hi = 0, num_classes - 1
    while lo <= hi:
        order.append(lo)
        if hi != lo:
            order.append(hi)
        lo, hi = lo + 1, hi - 1
    return levels[order]


def _smooth_curve(rng: np.random.Generator, width: int, smoothness: float) -> np.ndarray:
    """Random walk smoothed with a Gaussian of ``smoothness`` columns, scaled to [-1, 1]."""
    if not np.isfinite(smoothness):
        return np.zeros(width)
    walk = np.cumsum(rng.normal(size=width))
    if smoothness > 0:
        walk = ndimage.gaussian_filter1d(walk, smoothness, mode="nearest")
    walk -= walk.mean()
    peak = np.abs(walk).max()
    return walk / peak if peak > 0 else walk


def boundaries_to_mask(b: BoundarySet, height: int, width: int | None = None) -> np.ndarray:
    """Pixel (r, col) gets the number of boundaries with floor(row) <= r."""
    rows = b.rows
    width = rows.shape[1] if width is None else width
    if rows.shape[1] != width:
        raise ValueError(f"boundary set has {rows.shape[1]} columns, expected {width}")
    if np.any(np.diff(rows, axis=0) < 0):
        raise ValueError("boundaries must be ordered top to bottom in every column")
    edges = np.floor(rows).astype(np.int64)
    r = np.arange(height)[None, :, None]
    return (edges[:, None, :] <= r).sum(axis=0).astype(np.int64)


def mask_to_boundaries(Y: np.ndarray, num_classes: int) -> BoundarySet:
    """Per column, the split row for each boundary that best separates labels < k from labels >= k.

    The split minimises the number of disagreeing pixels (ties go to the
    uppermost row), which equals the first crossing on clean columns and is
    insensitive to isolated label noise. Rows are then made monotone across
    boundaries. Boundary k is flagged invalid in columns where class k is absent.
    """
    Y = np.asarray(Y)
    height, width = Y.shape
    n_b = num_classes - 1
    rows = np.zeros((n_b, width))
    valid = np.zeros((n_b, width), dtype=bool)
    r = np.arange(height + 1)[:, None]
    for k in range(1, num_classes):
        below = (Y >= k).astype(np.int64)
        prefix = np.vstack([np.zeros((1, width), dtype=np.int64), np.cumsum(below, axis=0)])
        cost = 2 * prefix - r + height - prefix[-1]
        rows[k - 1] = np.argmin(cost, axis=0)
        valid[k - 1] = (Y == k).any(axis=0)
    rows = np.maximum.accumulate(rows, axis=0)
    return BoundarySet(rows, valid)


def generate_synthetic(count: int, height: int = 64, width: int = 64, num_classes: int = 5,
                       seed: int = 0, smoothness: float = 8.0):
    """Layered images with C-1 smooth non-crossing boundaries.

    Returns a list of ``(LabeledSample, BoundarySet)``. Every layer is at least
    one pixel thick in every column, so each image contains all classes.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if num_classes > height:
        raise ValueError(f"cannot fit {num_classes - 1} boundaries with 1-pixel layers into {height} rows")
    palette = layer_palette(num_classes)
    n_inner = num_classes - 2
    out = []
    for i in range(count):
        rng = RngStream(seed, "synthetic", i).numpy
        span_frac = rng.uniform(0.45, 0.65) if n_inner else 0.0
        thickness = rng.uniform(0.6, 1.4, n_inner)
        if n_inner:
            thickness *= span_frac * height / thickness.sum()
        rows = np.zeros((num_classes - 1, width))
        for k in range(n_inner):
            mod = 1.0 + 0.3 * _smooth_curve(rng, width, smoothness)
            rows[k + 1] = rows[k] + np.maximum(thickness[k] * mod, 1.0)
        span = rows[-1].max()
        amplitude = rng.uniform(0.03, 0.1) * height
        slack = height - 2.0 - span
        amplitude = min(amplitude, max(slack, 0.0) / 2 * 0.9)
        shift = 1.0 + amplitude + rng.uniform(0.15, 0.85) * max(slack - 2 * amplitude, 0.0)
        rows += shift + amplitude * _smooth_curve(rng, width, smoothness)
        if rows.min() < 1.0 or rows.max() >= height - 1 + 1e-9:
            # layers too thick for the frame: compress uniformly
            lo, hi = rows.min(), rows.max()
            rows = 1.0 + (rows - lo) * (height - 2.5) / max(hi - lo, 1e-9)
        b = BoundarySet(rows)
        mask = boundaries_to_mask(b, height, width)
        image = palette[mask] + rng.normal(0.0, TEXTURE_SIGMA, size=(height, width))
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        out.append((LabeledSample(image, mask), b))
    return out


def apply_transform(sample: LabeledSample, angle: float, mirror: bool) -> LabeledSample:
    image, mask = sample.image, sample.mask
    if mirror:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if angle != 0.0:
        image = ndimage.rotate(image, angle, reshape=False, order=1, mode="constant", cval=0.0)
        mask = ndimage.rotate(mask, angle, reshape=False, order=0, mode="constant", cval=0)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return LabeledSample(np.ascontiguousarray(image), np.ascontiguousarray(mask, dtype=np.int64))


def augment(sample: LabeledSample, rng: RngStream) -> LabeledSample:
    """Random horizontal mirror (p=0.5) and rotation in [-15, 15] degrees."""
    mirror = bool(rng.numpy.random() < 0.5)
    angle = float(rng.numpy.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    return apply_transform(sample, angle, mirror)


def _blocks(shape, spec: NoiseSpec):
    """Yield (row, col, intensity) for each block; level k's blocks prefix level k+1's."""
    height, width = shape
    s = spec.block_size
    rng = RngStream(spec.seed, "block-noise").numpy
    for _ in range(spec.count):
        r = int(rng.integers(0, max(height - s, 0) + 1))
        c = int(rng.integers(0, max(width - s, 0) + 1))
        yield r, c, float(rng.uniform(0.0, 1.0))


def add_block_noise(X: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Paste ``spec.count`` constant-intensity s x s blocks at uniform random positions."""
    out = np.array(X, dtype=np.float32, copy=True)
    s = spec.block_size
    for r, c, value in _blocks(out.shape, spec):
        out[r:r + s, c:c + s] = value
    return out


def block_noise_region(shape, spec: NoiseSpec) -> np.ndarray:
    """Boolean map of the pixels covered by the blocks of ``spec``."""
    region = np.zeros(shape, dtype=bool)
    s = spec.block_size
    for r, c, _ in _blocks(shape, spec):
        region[r:r + s, c:c + s] = True
    return region
