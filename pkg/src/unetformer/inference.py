"""Overlapping sliding-window inference with probability blending."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import ConfigError, Tensor, no_grad


@dataclass
class SlidingWindowConfig:
    roi: int = 96
    overlap: float = 0.7
    blend: str = "constant"

    def __post_init__(self):
        if not 0 <= self.overlap < 1:
            raise ConfigError(f"overlap must be in [0, 1), got {self.overlap}")
        if self.roi < 32 or self.roi % 32:
            raise ConfigError(f"roi must be a positive multiple of 32, got {self.roi}")
        if self.blend not in ("constant", "gaussian"):
            raise ConfigError(f"unknown blend mode {self.blend!r}")

    @property
    def stride(self) -> int:
        return max(1, math.floor(self.roi * (1.0 - self.overlap) + 0.5))


def window_starts(extent: int, roi: int, stride: int) -> list[int]:
    """Origins every ``stride`` voxels plus a final window flush with the far edge."""
    if extent <= roi:
        return [0]
    starts = list(range(0, extent - roi + 1, stride))
    if starts[-1] != extent - roi:
        starts.append(extent - roi)
    return starts


def blend_weights(roi: int, mode: str) -> np.ndarray:
    if mode == "constant":
        return np.ones((roi,) * 3)
    sigma = roi / 8.0
    ax = np.arange(roi) - (roi - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    w = g[:, None, None] * g[None, :, None] * g[None, None, :]
    return w / w.max()


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def sliding_window_infer(predict: Callable[[Tensor], Tensor], volume, config: SlidingWindowConfig) -> np.ndarray:
    """Class probabilities (K, H, W, D) for a (1, H, W, D) or (1, 1, H, W, D) volume.

    ``predict`` maps a (1, 1, r, r, r) tensor to (1, K, r, r, r) logits. Windows
    are accumulated in raster order, so repeated runs are bit-identical.
    """
    vol = volume.data if isinstance(volume, Tensor) else np.asarray(volume, dtype=np.float64)
    if vol.ndim == 4:
        vol = vol[None]
    if vol.ndim != 5 or vol.shape[:2] != (1, 1):
        raise ConfigError(f"expected a single-channel volume, got shape {vol.shape}")
    spatial = vol.shape[2:]
    roi = config.roi
    padded = tuple(max(n, roi) for n in spatial)
    if padded != spatial:
        vol = np.pad(vol, [(0, 0), (0, 0)] + [(0, p - n) for p, n in zip(padded, spatial)])
    starts = [window_starts(n, roi, config.stride) for n in padded]
    weights = blend_weights(roi, config.blend)
    acc = None
    norm = np.zeros(padded)
    with no_grad():
        for x in starts[0]:
            for y in starts[1]:
                for z in starts[2]:
                    patch = vol[:, :, x : x + roi, y : y + roi, z : z + roi]
                    logits = predict(Tensor(patch))
                    if logits.shape[2:] != (roi,) * 3:
                        raise ConfigError(f"model returned {logits.shape} for a {roi}^3 window")
                    probs = softmax_channels(logits.data[0])
                    if acc is None:
                        acc = np.zeros((probs.shape[0],) + padded)
                    acc[:, x : x + roi, y : y + roi, z : z + roi] += probs * weights
                    norm[x : x + roi, y : y + roi, z : z + roi] += weights
    out = acc / norm
    h, w, d = spatial
    return out[:, :h, :w, :d]


def coverage(extent: tuple[int, int, int], config: SlidingWindowConfig) -> np.ndarray:
    """Number of windows covering each voxel."""
    padded = tuple(max(n, config.roi) for n in extent)
    cnt = np.zeros(padded, dtype=np.int64)
    starts = [window_starts(n, config.roi, config.stride) for n in padded]
    r = config.roi
    for x in starts[0]:
        for y in starts[1]:
            for z in starts[2]:
                cnt[x : x + r, y : y + r, z : z + r] += 1
    return cnt[: extent[0], : extent[1], : extent[2]]
