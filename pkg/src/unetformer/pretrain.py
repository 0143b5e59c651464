"""Masked-volume pre-training: cube masking, a lightweight skip-connected
reconstruction decoder, and the masked L1 objective."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decoders import CNNDecoder, DecoderConfig
from .losses import masked_l1
from .nn import CNNBlock, Conv3d, ConvTranspose3d, Module, channel_concat, count_parameters
from .optim import AdamW, lr_at
from .swin import EncoderConfig, SkipSet, SwinEncoder
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

REFERENCE_POINT = (0.4, 16)
RECON_SKIPS = (1, 3)  # level 5 enters as the decoder input


@dataclass(frozen=True)
class MaskSpec:
    vol_shape: tuple[int, int, int]
    patch_size: int
    ratio: float
    masked_cubes: tuple[int, ...]
    seed: int

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(n // self.patch_size for n in self.vol_shape)

    @property
    def total_cubes(self) -> int:
        return int(np.prod(self.grid))

    @property
    def masked_voxel_count(self) -> int:
        return len(self.masked_cubes) * self.patch_size**3

    def cube_mask(self) -> np.ndarray:
        flags = np.zeros(self.total_cubes, dtype=bool)
        flags[list(self.masked_cubes)] = True
        return flags.reshape(self.grid)

    def voxel_mask(self) -> np.ndarray:
        """Boolean (H, W, D) mask of hidden voxels."""
        p = self.patch_size
        cubes = self.cube_mask()
        return cubes.repeat(p, 0).repeat(p, 1).repeat(p, 2)


def masked_cube_count(ratio: float, n_cubes: int) -> int:
    """round-half-up(ratio * n_cubes)."""
    return int(math.floor(ratio * n_cubes + 0.5))


def generate_mask(vol_shape, patch_size: int, ratio: float, seed: int) -> MaskSpec:
    """Uniformly choose round(ratio * n_cubes) of the p^3 cubes, without replacement."""
    vol_shape = tuple(int(n) for n in (vol_shape if len(vol_shape) == 3 else vol_shape[-3:]))
    if patch_size < 1 or any(n % patch_size for n in vol_shape):
        raise ShapeError(f"volume extents {vol_shape} not divisible by patch size {patch_size}")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"masking ratio must be in [0, 1], got {ratio}")
    n = int(np.prod([v // patch_size for v in vol_shape]))
    count = masked_cube_count(ratio, n)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=count, replace=False)) if count else np.array([], dtype=np.int64)
    return MaskSpec(vol_shape, patch_size, float(ratio), tuple(int(c) for c in chosen), int(seed))


def apply_mask(volume, mask: MaskSpec, fill: float = 0.0):
    """Copy of ``volume`` with masked cubes set to ``fill``; other voxels untouched."""
    arr = volume.data if isinstance(volume, Tensor) else np.asarray(volume, dtype=np.float64)
    if arr.shape[-3:] != mask.vol_shape:
        raise ShapeError(f"volume {arr.shape} does not match mask shape {mask.vol_shape}")
    out = arr.copy()
    out[..., mask.voxel_mask()] = fill
    return Tensor(out) if isinstance(volume, Tensor) else out


class ReconDecoder(Module):
    """Half-width CNN decoder fed by levels 5, 3 and 1, ending in a 1x1x1 conv to one channel."""

    def __init__(self, enc: EncoderConfig, rng: np.random.Generator):
        skip = enc.skip_channels()
        widths = [max(1, c // 2) for c in skip]
        self.bottleneck = CNNBlock(skip[5], widths[5], rng)
        self.up = [ConvTranspose3d(widths[i + 1], widths[i], rng) for i in range(5)]
        self.blocks = [
            CNNBlock(widths[i] + (skip[i] if i in RECON_SKIPS else 0), widths[i], rng) for i in range(5)
        ]
        self.out = Conv3d(widths[0], 1, 1, rng)
        self.widths = widths

    def forward(self, skips: SkipSet) -> Tensor:
        x = self.bottleneck(skips[5])
        for i in range(4, -1, -1):
            x = self.up[i](x)
            if i in RECON_SKIPS:
                x = channel_concat(x, skips[i])
            x = self.blocks[i](x)
        return self.out(x)


class MaskedVolumeModel(Module):
    """Encoder + reconstruction decoder; parameter names under ``encoder.`` match
    those of the segmentation model."""

    def __init__(self, enc_config: EncoderConfig | None = None, seed: int = 0):
        self.enc_config = enc_config or EncoderConfig()
        rng = np.random.default_rng(seed)
        self.encoder = SwinEncoder(self.enc_config, rng)
        self.recon_decoder = ReconDecoder(self.enc_config, rng)

    def forward(self, volume: Tensor) -> Tensor:
        out = self.recon_decoder(self.encoder(volume))
        return out.reshape(out.shape[1:])


def recon_forward(model: MaskedVolumeModel, masked_volume: Tensor) -> Tensor:
    """(1, 1, H, W, D) masked input -> (1, H, W, D) reconstruction."""
    return model(masked_volume)


def recon_decoder_is_lighter(enc: EncoderConfig) -> tuple[int, int]:
    """(reconstruction decoder, segmentation CNN decoder) parameter counts at equal C."""
    rng = np.random.default_rng(0)
    return (
        count_parameters(ReconDecoder(enc, rng)),
        count_parameters(CNNDecoder(enc, DecoderConfig("cnn", 1, deep_supervision=False), rng)),
    )


@dataclass
class PretrainConfig:
    lr: float = 2e-4
    steps: int = 100
    warmup_steps: int = 0
    mask_ratio: float = 0.4
    patch_size: int = 16
    seed: int = 0
    resample_mask: bool = True
    fill: float = 0.0
    weight_decay: float = 1e-5


@dataclass
class PretrainState:
    model: MaskedVolumeModel
    optimizer: AdamW
    config: PretrainConfig
    step: int = 0
    losses: list[float] = field(default_factory=list)

    @classmethod
    def create(cls, model: MaskedVolumeModel, config: PretrainConfig) -> "PretrainState":
        return cls(model, AdamW(model.parameters(), config.lr, weight_decay=config.weight_decay), config)


def pretrain_step(state: PretrainState, volume: np.ndarray, mask: MaskSpec) -> float:
    """One AdamW step on the masked L1 loss; returns the pre-step loss."""
    if not mask.masked_cubes:
        raise ValueError("pretrain_step needs a non-empty mask")
    vol = np.asarray(volume, dtype=np.float64).reshape((1, 1) + mask.vol_shape)
    cfg = state.config
    lr = lr_at(state.step, cfg.lr, cfg.warmup_steps, max(cfg.steps, state.step + 1))
    state.optimizer.zero_grad()
    pred = recon_forward(state.model, Tensor(apply_mask(vol, mask, cfg.fill)))
    loss = masked_l1(pred, vol[0], mask)
    loss.backward()
    state.optimizer.step(lr)
    state.step += 1
    value = loss.item()
    state.losses.append(value)
    return value


def pretrain(model: MaskedVolumeModel, volumes: list[np.ndarray], config: PretrainConfig) -> PretrainState:
    """Run ``config.steps`` steps, cycling over ``volumes``; masks are re-drawn
    every step (seeded by ``config.seed`` and the step) unless ``resample_mask`` is off."""
    state = PretrainState.create(model, config)
    shape = np.asarray(volumes[0]).shape[-3:]
    for step in range(config.steps):
        mseed = config.seed * 1_000_003 + (step if config.resample_mask else 0)
        mask = generate_mask(shape, config.patch_size, config.mask_ratio, mseed)
        pretrain_step(state, volumes[step % len(volumes)], mask)
    return state


def ablation_sweep(ratios, patch_sizes, volumes: list[np.ndarray], enc_config: EncoderConfig, steps: int = 20,
                   seed: int = 0, lr: float = 2e-4, out_dir: str | Path | None = None) -> list[dict]:
    """Pre-train one fresh model per (ratio, patch) cell and report the final
    reconstruction loss. Cells whose patch size does not tile the volume are
    skipped with a warning. Writes ``sweep.csv`` and ``sweep.json`` to ``out_dir``."""
    rows = []
    shape = np.asarray(volumes[0]).shape[-3:]
    for r in ratios:
        for p in patch_sizes:
            if any(n % p for n in shape) or masked_cube_count(r, int(np.prod([n // p for n in shape]))) == 0:
                log.warning("skipping sweep cell ratio=%s patch=%s for volume %s", r, p, shape)
                continue
            model = MaskedVolumeModel(enc_config, seed=seed)
            cfg = PretrainConfig(lr=lr, steps=steps, mask_ratio=r, patch_size=p, seed=seed)
            state = pretrain(model, volumes, cfg)
            rows.append({
                "ratio": float(r),
                "patch": int(p),
                "final_loss": float(state.losses[-1]),
                "dice": None,
                "reference": (float(r), int(p)) == REFERENCE_POINT,
            })
    if out_dir is not None:
        write_sweep(rows, out_dir)
    return rows


def write_sweep(rows: list[dict], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ratio", "patch", "final_loss", "dice"])
        for row in rows:
            writer.writerow([row["ratio"], row["patch"], repr(row["final_loss"]), "" if row["dice"] is None else repr(row["dice"])])
    (out / "sweep.json").write_text(json.dumps(rows, indent=2))
