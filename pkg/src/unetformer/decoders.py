"""CNN (UNetFormer) and transformer (UNetFormer+) decoders, segmentation heads
and the full segmentation model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import CNNBlock, Conv3d, ConvTranspose3d, LayerNorm, Module, SegHead, channel_concat
from .swin import (
    MLP,
    EncoderConfig,
    SkipSet,
    SwinEncoder,
    SwinLayer,
    TokenGrid,
    WindowAttention,
    windowed_attention,
)
from .tensor import ConfigError, ContractError, Tensor

VARIANTS = ("cnn", "transformer")


@dataclass
class DecoderConfig:
    variant: str = "cnn"
    num_classes: int = 3
    deep_supervision: bool = True
    upsample_mode: str | None = None
    residual_projection: bool = False  # Eq.-3 MLP line with a residual term

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown decoder variant {self.variant!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.upsample_mode is None:
            self.upsample_mode = "deconv" if self.variant == "cnn" else "trilinear"


@dataclass
class DecoderOutputs:
    """Logits at input resolution, shaped (1, K, H, W, D)."""

    logits_full: Tensor
    logits_aux1: Tensor | None = None
    logits_aux2: Tensor | None = None

    def all(self) -> list[Tensor]:
        return [t for t in (self.logits_full, self.logits_aux1, self.logits_aux2) if t is not None]


def _require_skips(skips: SkipSet) -> None:
    if skips is None or len(skips) != 6 or any(f is None for f in skips.features):
        raise ContractError("decoder needs a complete SkipSet (levels 0..5)")


class _HeadsMixin:
    def _make_heads(self, widths, num_classes, deep_supervision, rng):
        self.head = SegHead(widths[0], num_classes, rng)
        if deep_supervision:
            self.head_aux1 = SegHead(widths[1], num_classes, rng)
            self.head_aux2 = SegHead(widths[2], num_classes, rng)
        else:
            self.head_aux1 = self.head_aux2 = None

    def _outputs(self, level_feats: dict[int, Tensor]) -> DecoderOutputs:
        out = DecoderOutputs(self.head(level_feats[0]))
        if self.head_aux1 is not None:
            # a 1x1x1 conv commutes with trilinear upsampling (weights sum to 1),
            # so the taps are projected to K channels first and upsampled after
            out.logits_aux1 = ops.trilinear_upsample(self.head_aux1(level_feats[1]), 2)
            out.logits_aux2 = ops.trilinear_upsample(self.head_aux2(level_feats[2]), 4)
        return out


class CNNDecoder(Module, _HeadsMixin):
    """Conv bottleneck on level 5, then per level: 2x2x2 deconv, concat skip,
    CNN block. Widths follow the skip widths 16C -> 8C -> 4C -> 2C -> C -> C0."""

    def __init__(self, enc: EncoderConfig, config: DecoderConfig, rng: np.random.Generator):
        widths = enc.skip_channels()
        self.bottleneck = CNNBlock(widths[5], widths[5], rng)
        self.up = [ConvTranspose3d(widths[i + 1], widths[i], rng) for i in range(5)]
        self.blocks = [CNNBlock(2 * widths[i], widths[i], rng) for i in range(5)]
        self._make_heads(widths, config.num_classes, config.deep_supervision, rng)
        self.widths = widths

    def forward(self, skips: SkipSet) -> DecoderOutputs:
        _require_skips(skips)
        x = self.bottleneck(skips[5])
        feats = {}
        for i in range(4, -1, -1):
            x = self.up[i](x)
            x = self.blocks[i](channel_concat(x, skips[i]))
            feats[i] = x
        return self._outputs(feats)


class ProjectionLayer(Module):
    """Decoder layer projection: w = MLP(LN(w)); w = W-MSA(LN(w)) + w.

    The MLP line is non-residual unless ``residual`` is set.
    """

    def __init__(self, dim: int, num_heads: int, window: int, mlp_ratio: float, rng: np.random.Generator, residual: bool = False, qkv_bias: bool = True):
        self.norm1 = LayerNorm(dim)
        self.mlp = MLP(dim, int(round(dim * mlp_ratio)), rng)
        self.norm2 = LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window, rng, qkv_bias)
        self.window = window
        self.residual = residual

    def forward(self, grid: TokenGrid) -> TokenGrid:
        w = grid.values
        m = self.mlp(self.norm1(w))
        w = w + m if self.residual else m
        w = windowed_attention(self.attn, TokenGrid(grid.dims, self.norm2(w)), self.window, False) + w
        return TokenGrid(grid.dims, w)


class TransformerDecoder(Module, _HeadsMixin):
    """Two-layer Swin bottleneck on level 5, then per level: trilinear x2,
    concat skip, linear channel reduction, one projection layer."""

    def __init__(self, enc: EncoderConfig, config: DecoderConfig, rng: np.random.Generator):
        widths = enc.skip_channels()
        c5 = widths[5]
        h5 = enc.heads_for(c5)
        self.bottleneck = [
            SwinLayer(c5, h5, enc.window, enc.mlp_ratio, rng, shifted=False, qkv_bias=enc.qkv_bias),
            SwinLayer(c5, h5, enc.window, enc.mlp_ratio, rng, shifted=True, qkv_bias=enc.qkv_bias),
        ]
        self.reduce = [Conv3d(widths[i + 1] + widths[i], widths[i], 1, rng) for i in range(5)]
        self.project = [
            ProjectionLayer(widths[i], enc.heads_for(widths[i]), enc.window, enc.mlp_ratio, rng, config.residual_projection, enc.qkv_bias)
            for i in range(5)
        ]
        self._make_heads(widths, config.num_classes, config.deep_supervision, rng)
        self.widths = widths

    def forward(self, skips: SkipSet) -> DecoderOutputs:
        _require_skips(skips)
        grid = TokenGrid.from_volume(skips[5])
        for layer in self.bottleneck:
            grid = layer(grid)
        x = grid.volume()
        feats = {}
        for i in range(4, -1, -1):
            x = ops.trilinear_upsample(x, 2)
            x = self.reduce[i](channel_concat(x, skips[i]))
            x = self.project[i](TokenGrid.from_volume(x)).volume()
            feats[i] = x
        return self._outputs(feats)


def build_decoder(enc: EncoderConfig, config: DecoderConfig, rng: np.random.Generator) -> Module:
    cls = CNNDecoder if config.variant == "cnn" else TransformerDecoder
    return cls(enc, config, rng)


class UNetFormer(Module):
    """Swin encoder + CNN or transformer decoder."""

    def __init__(self, enc_config: EncoderConfig | None = None, dec_config: DecoderConfig | None = None, seed: int = 0):
        self.enc_config = enc_config or EncoderConfig()
        self.dec_config = dec_config or DecoderConfig()
        rng = np.random.default_rng(seed)
        self.encoder = SwinEncoder(self.enc_config, rng)
        self.decoder = build_decoder(self.enc_config, self.dec_config, rng)

    def forward(self, volume: Tensor) -> DecoderOutputs:
        return self.decoder(self.encoder(volume))

    def logits(self, volume: Tensor) -> Tensor:
        return self.forward(volume).logits_full


def cnn_decode(skips: SkipSet, decoder: CNNDecoder) -> DecoderOutputs:
    return decoder(skips)


def transformer_decode(skips: SkipSet, decoder: TransformerDecoder) -> DecoderOutputs:
    return decoder(skips)
