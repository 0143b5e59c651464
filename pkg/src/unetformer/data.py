"""Synthetic volumes with known geometry, and training-time augmentation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .swin import check_input_extent


@dataclass
class SegSample:
    """image: (1, H, W, D) float64; label: (H, W, D) integer classes in [0, K)."""

    image: np.ndarray
    label: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[0] != 1:
            raise ValueError(f"image must be (1, H, W, D), got {self.image.shape}")
        if self.label.shape != self.image.shape[1:]:
            raise ValueError(f"label shape {self.label.shape} != image spatial shape {self.image.shape[1:]}")
        if not np.all(np.isfinite(self.image)):
            raise ValueError("image contains non-finite values")


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n) + 0.5 for n in shape], indexing="ij")
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def synth_sample(rng: np.random.Generator, size: int, num_classes: int = 3, contrast: float = 1.0, noise: float = 0.1) -> SegSample:
    """Background plus nested ellipsoids: class 1 an 'organ', class 2 a smaller
    'tumor' inside it, further classes as extra organs. Class c has mean
    intensity c * contrast on a zero background."""
    shape = (size,) * 3
    label = np.zeros(shape, dtype=np.int64)
    if num_classes >= 2:
        center = size * (0.5 + rng.uniform(-0.08, 0.08, 3))
        radii = size * rng.uniform(0.22, 0.32, 3)
        organ = _ellipsoid(shape, center, radii)
        label[organ] = 1
        if num_classes >= 3:
            t_radii = radii * rng.uniform(0.3, 0.45, 3)
            offset = (radii - t_radii) * rng.uniform(-0.4, 0.4, 3)
            tumor = _ellipsoid(shape, center + offset, t_radii) & organ
            label[tumor] = 2
        for c in range(3, num_classes):
            r = size * rng.uniform(0.06, 0.1, 3)
            ctr = rng.uniform(r + 1, size - r - 1)
            label[_ellipsoid(shape, ctr, r) & (label == 0)] = c
    image = label.astype(np.float64) * contrast + rng.normal(0.0, noise, shape)
    return SegSample(image[None], label)


def synth_dataset(n: int, vol_size: int, num_classes: int = 3, seed: int = 0, contrast: float = 1.0, noise: float = 0.1) -> list[SegSample]:
    check_input_extent((vol_size,) * 3)
    rng = np.random.default_rng(seed)
    return [synth_sample(rng, vol_size, num_classes, contrast, noise) for _ in range(n)]


@dataclass
class AugmentFlags:
    flip: bool = False
    rotate90: bool = False
    intensity_scale: bool = False
    intensity_shift: bool = False
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.9, 1.1)
    shift_range: tuple[float, float] = (-0.1, 0.1)

    def any(self) -> bool:
        return self.flip or self.rotate90 or self.intensity_scale or self.intensity_shift


def flip(sample: SegSample, axis: int) -> SegSample:
    return replace(sample, image=np.flip(sample.image, axis + 1).copy(), label=np.flip(sample.label, axis).copy())


def rotate90(sample: SegSample, k: int, axes: tuple[int, int]) -> SegSample:
    image = np.rot90(sample.image, k, axes=(axes[0] + 1, axes[1] + 1)).copy()
    label = np.rot90(sample.label, k, axes=axes).copy()
    return replace(sample, image=image, label=label)


def intensity(sample: SegSample, scale: float = 1.0, shift: float = 0.0) -> SegSample:
    if scale == 1.0 and shift == 0.0:
        return sample
    return replace(sample, image=sample.image * scale + shift)


def augment(sample: SegSample, rng: np.random.Generator, flags: AugmentFlags) -> SegSample:
    """Random mirror flips, 90-degree rotations and intensity scale/shift.
    Spatial transforms hit image and label alike; intensity ones the image only."""
    if flags.flip:
        for axis in range(3):
            if rng.random() < flags.flip_prob:
                sample = flip(sample, axis)
    if flags.rotate90:
        k = int(rng.integers(0, 4))
        pairs = [(0, 1), (0, 2), (1, 2)]
        axes = pairs[int(rng.integers(0, 3))]
        if k and len({sample.label.shape[a] for a in axes}) == 1:
            sample = rotate90(sample, k, axes)
    scale = rng.uniform(*flags.scale_range) if flags.intensity_scale else 1.0
    shift = rng.uniform(*flags.shift_range) if flags.intensity_shift else 0.0
    return intensity(sample, scale, shift)
