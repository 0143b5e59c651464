"""Segmentation and reconstruction losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ContractError, ShapeError, Tensor, absolute, clip_min, log, where_mask

LOG_CLAMP = 1e-12
DEFAULT_SMOOTH = 1e-5


@dataclass
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.25

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def dice_ce_loss(probs: Tensor, onehot, smooth: float = DEFAULT_SMOOTH) -> Tensor:
    """Soft Dice + cross-entropy on (K, N) class probabilities.

    loss = 1 - (1/K) sum_k (2 sum_n G Y + s) / (sum_n G^2 + sum_n Y^2 + s)
             - (1/N) sum_n sum_k G log(max(Y, 1e-12))
    With s = 0 this is the textbook form; s > 0 keeps absent classes finite
    while a perfect prediction still scores exactly 0.
    """
    g = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot, dtype=np.float64)
    if probs.shape != g.shape or probs.ndim != 2:
        raise ShapeError(f"probs {probs.shape} and one-hot {g.shape} must both be (K, N)")
    k, n = g.shape
    inter = (probs * g).sum(axis=1)
    denom = (probs * probs).sum(axis=1) + (g * g).sum(axis=1)
    dice = ((inter * 2.0 + smooth) / (denom + smooth)).sum() * (1.0 / k)
    ce = (log(clip_min(probs, LOG_CLAMP)) * g).sum() * (-1.0 / n)
    return 1.0 - dice + ce


def onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(K, N) one-hot matrix for a flattened integer label array."""
    flat = np.asarray(labels).reshape(-1).astype(np.int64)
    if flat.size and (flat.min() < 0 or flat.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    out = np.zeros((num_classes, flat.size))
    out[flat, np.arange(flat.size)] = 1.0
    return out


def logits_to_probs(logits: Tensor) -> Tensor:
    """(1, K, H, W, D) logits -> (K, N) softmax probabilities."""
    k = logits.shape[1]
    cols = logits.reshape(k, -1).transpose(1, 0)
    return ops.softmax_lastaxis(cols).transpose(1, 0)


def segmentation_loss(logits: Tensor, target_onehot: np.ndarray, smooth: float = DEFAULT_SMOOTH) -> Tensor:
    return dice_ce_loss(logits_to_probs(logits), target_onehot, smooth)


def deep_supervision_loss(outputs, target_onehot: np.ndarray, weights: LossWeights | None = None, smooth: float = DEFAULT_SMOOTH) -> Tensor:
    """L(G, Y0) + lambda1 L(G, Y1) + lambda2 L(G, Y2) over full-resolution logits."""
    weights = weights or LossWeights()
    total = segmentation_loss(outputs.logits_full, target_onehot, smooth)
    for lam, aux, name in (
        (weights.lambda1, outputs.logits_aux1, "aux1"),
        (weights.lambda2, outputs.logits_aux2, "aux2"),
    ):
        if lam == 0:
            continue
        if aux is None:
            raise ContractError(f"deep supervision weight set but decoder produced no {name} output")
        if aux.shape != outputs.logits_full.shape:
            raise ShapeError(f"{name} logits {aux.shape} not at image resolution {outputs.logits_full.shape}")
        total = total + segmentation_loss(aux, target_onehot, smooth) * lam
    return total


def masked_l1(pred: Tensor, target, mask, normalize: str = "voxels") -> Tensor:
    """Mean absolute error over masked voxels only.

    ``mask`` is a MaskSpec or a boolean array of the prediction's shape.
    ``normalize`` divides by the masked voxel count (default) or masked cube count.
    """
    x = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != x.shape:
        raise ShapeError(f"prediction {pred.shape} and target {x.shape} differ")
    if hasattr(mask, "voxel_mask"):
        vox = mask.voxel_mask().reshape(pred.shape)
        n_cubes = len(mask.masked_cubes)
    else:
        vox = np.asarray(mask, dtype=bool).reshape(pred.shape)
        n_cubes = None
    count = int(vox.sum())
    if count == 0:
        raise ValueError("masked_l1: mask selects no voxels")
    if normalize == "voxels":
        denom = count
    elif normalize == "cubes":
        if n_cubes is None:
            raise ValueError("cube normalisation needs a MaskSpec")
        denom = n_cubes
    else:
        raise ValueError(f"unknown normalisation {normalize!r}")
    return where_mask(absolute(pred - x), vox).sum() * (1.0 / denom)
