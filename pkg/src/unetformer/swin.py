"""3D Swin Transformer encoder.

Token grids are stored as an (h*w*d, C) matrix in row-major order over
(x, y, z): token (x, y, z) lives in row ``(x*w + y)*d + z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import ops
from .nn import CNNBlock, LayerNorm, Linear, Module, Parameter
from .tensor import ConfigError, ShapeError, Tensor, pad, roll, take

MASK_VALUE = -1e9


@dataclass
class EncoderConfig:
    embed_dim: int = 96
    depths: tuple[int, ...] = (2, 2, 2, 2)
    num_heads: tuple[int, ...] = (3, 6, 12, 24)
    window: int = 4
    mlp_ratio: float = 4.0
    token_size: int = 2
    qkv_bias: bool = True
    in_channels: int = 1

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.num_heads = tuple(int(h) for h in self.num_heads)
        self.validate()

    def validate(self) -> None:
        if self.token_size != 2:
            raise ConfigError("token_size is fixed at 2")
        if self.window < 1:
            raise ConfigError("window size must be >= 1")
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ConfigError("encoder has exactly four stages")
        if self.embed_dim % 2:
            raise ConfigError("embed_dim must be even (stem width is embed_dim // 2)")
        for s, heads in enumerate(self.num_heads):
            width = self.embed_dim * 2**s
            if heads < 1 or width % heads:
                raise ConfigError(f"stage {s}: width {width} not divisible by {heads} heads")

    @property
    def stem_channels(self) -> int:
        return self.embed_dim // 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads[0]

    def skip_channels(self) -> list[int]:
        c = self.embed_dim
        return [self.stem_channels, c, 2 * c, 4 * c, 8 * c, 16 * c]

    def heads_for(self, width: int) -> int:
        """Head count for an arbitrary width, keeping the stage-0 head size where possible."""
        for s in range(4):
            if width == self.embed_dim * 2**s:
                return self.num_heads[s]
        heads = max(1, width // self.head_dim)
        while width % heads:
            heads -= 1
        return heads

    @classmethod
    def tiny(cls, **overrides) -> "EncoderConfig":
        kw = dict(embed_dim=8, depths=(1, 1, 1, 1), num_heads=(2, 4, 8, 16), window=2)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class TokenGrid:
    dims: tuple[int, int, int]
    values: Tensor

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        h, w, d = self.dims
        if self.values.ndim != 2 or self.values.shape[0] != h * w * d:
            raise ShapeError(f"TokenGrid values {self.values.shape} do not match dims {self.dims}")

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def volume(self) -> Tensor:
        """As a (1, C, h, w, d) tensor."""
        return self.values.transpose(1, 0).reshape((1, self.channels) + self.dims)

    @classmethod
    def from_volume(cls, x: Tensor) -> "TokenGrid":
        if x.ndim != 5 or x.shape[0] != 1:
            raise ShapeError("expected a (1, C, h, w, d) tensor")
        c = x.shape[1]
        dims = x.shape[2:]
        return cls(dims, x.reshape(c, -1).transpose(1, 0))


# -- window geometry ----------------------------------------------------------

def effective_window(dims, window: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Per-axis window extent and shift: axes that fit inside one window are
    not padded and not shifted."""
    sizes = tuple(min(window, n) for n in dims)
    shifts = tuple(0 if n <= window else window // 2 for n in dims)
    return sizes, shifts


@dataclass
class PadRecord:
    dims: tuple[int, int, int]
    padded: tuple[int, int, int]
    window: tuple[int, int, int]
    pad_mask: np.ndarray = field(repr=False)  # (n_windows, tokens_per_window), True for pad tokens

    @property
    def pads(self) -> tuple[int, int, int]:
        return tuple(p - n for p, n in zip(self.padded, self.dims))

    @property
    def n_windows(self) -> int:
        return int(np.prod([p // m for p, m in zip(self.padded, self.window)]))


def _partition_array(arr: np.ndarray, padded, window) -> np.ndarray:
    (ph, pw, pd), (mh, mw, md) = padded, window
    c = arr.shape[-1]
    a = arr.reshape(ph // mh, mh, pw // mw, mw, pd // md, md, c)
    return a.transpose(0, 2, 4, 1, 3, 5, 6).reshape(-1, mh * mw * md, c)


def _padded_dims(dims, window) -> tuple[int, int, int]:
    return tuple(-(-n // m) * m for n, m in zip(dims, window))


def window_partition(grid: TokenGrid, window: int, sizes=None) -> tuple[Tensor, PadRecord]:
    """Split a grid into non-overlapping windows, zero-padding up to multiples of the window."""
    if window < 1:
        raise ConfigError("window size must be >= 1")
    if sizes is None:
        sizes, _ = effective_window(grid.dims, window)
    padded = _padded_dims(grid.dims, sizes)
    c = grid.channels
    x = grid.values.reshape(grid.dims + (c,))
    flags = np.zeros(padded + (1,), dtype=bool)
    if padded != grid.dims:
        widths = [(0, p - n) for p, n in zip(padded, grid.dims)] + [(0, 0)]
        x = pad(x, widths)
        flags[grid.dims[0] :] = True
        flags[:, grid.dims[1] :] = True
        flags[:, :, grid.dims[2] :] = True
    (ph, pw, pd), (mh, mw, md) = padded, sizes
    x = x.reshape(ph // mh, mh, pw // mw, mw, pd // md, md, c)
    windows = x.transpose(0, 2, 4, 1, 3, 5, 6).reshape(-1, mh * mw * md, c)
    record = PadRecord(grid.dims, padded, sizes, _partition_array(flags, padded, sizes)[..., 0])
    return windows, record


def window_reverse(windows: Tensor, record: PadRecord) -> TokenGrid:
    (ph, pw, pd), (mh, mw, md) = record.padded, record.window
    c = windows.shape[-1]
    x = windows.reshape(ph // mh, pw // mw, pd // md, mh, mw, md, c)
    x = x.transpose(0, 3, 1, 4, 2, 5, 6).reshape(ph, pw, pd, c)
    h, w, d = record.dims
    if record.padded != record.dims:
        x = x[:h, :w, :d]
    return TokenGrid(record.dims, x.reshape(h * w * d, c))


def cyclic_shift(grid: TokenGrid, offsets) -> TokenGrid:
    """Token at (x, y, z) moves to ((x - s) mod h, ...)."""
    offsets = tuple(int(o) for o in offsets)
    if not any(offsets):
        return grid
    c = grid.channels
    x = grid.values.reshape(grid.dims + (c,))
    x = roll(x, tuple(-o for o in offsets), (0, 1, 2))
    return TokenGrid(grid.dims, x.reshape(-1, c))


@lru_cache(maxsize=64)
def relative_position_index(window_sizes: tuple[int, int, int], window: int) -> np.ndarray:
    """Row index into the (2M-1)^3 bias table for every (query, key) pair of a window."""
    coords = np.stack(np.meshgrid(*[np.arange(m) for m in window_sizes], indexing="ij"), -1).reshape(-1, 3)
    rel = coords[:, None, :] - coords[None, :, :] + (window - 1)
    span = 2 * window - 1
    idx = (rel[..., 0] * span + rel[..., 1]) * span + rel[..., 2]
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=64)
def shift_region_labels(padded: tuple[int, int, int], sizes: tuple[int, int, int], shifts: tuple[int, int, int]) -> np.ndarray:
    """Per-token region id (n_windows, n) after shifting: tokens wrapped
    around by the cyclic shift belong to a different region than their
    window neighbours."""
    labels = np.zeros(padded, dtype=np.int64)
    for ax, (p, m, s) in enumerate(zip(padded, sizes, shifts)):
        lab = np.zeros(p, dtype=np.int64)
        if s:
            lab[p - m : p - s] = 1
            lab[p - s :] = 2
        shape = [1, 1, 1]
        shape[ax] = p
        labels = labels * 3 + lab.reshape(shape)
    out = _partition_array(labels[..., None], padded, sizes)[..., 0]
    out.setflags(write=False)
    return out


def attention_mask(record: PadRecord, shifts=(0, 0, 0)) -> np.ndarray | None:
    """Additive (n_windows, n, n) mask: pad keys and cross-region pairs get MASK_VALUE."""
    blocked = np.repeat(record.pad_mask[:, None, :], record.pad_mask.shape[1], axis=1)
    if any(shifts):
        lab = shift_region_labels(record.padded, record.window, tuple(shifts))
        blocked = blocked | (lab[:, :, None] != lab[:, None, :])
    if not blocked.any():
        return None
    return np.where(blocked, MASK_VALUE, 0.0)


# -- attention ------------------------------------------------------------

class WindowAttention(Module):
    """Multi-head self-attention inside each window with a learned relative
    position bias table of (2M-1)^3 rows per head."""

    def __init__(self, dim: int, num_heads: int, window: int, rng: np.random.Generator, qkv_bias: bool = True):
        if dim % num_heads:
            raise ConfigError(f"{dim} channels not divisible by {num_heads} heads")
        self.q = Linear(dim, dim, rng, bias=qkv_bias)
        self.k = Linear(dim, dim, rng, bias=qkv_bias)
        self.v = Linear(dim, dim, rng, bias=qkv_bias)
        self.proj = Linear(dim, dim, rng)
        self.bias_table = Parameter(np.zeros(((2 * window - 1) ** 3, num_heads)))
        self.num_heads = num_heads
        self.window = window

    @property
    def head_dim(self) -> int:
        return self.q.weight.shape[0] // self.num_heads

    def forward(self, windows: Tensor, window_sizes, mask: np.ndarray | None = None) -> Tensor:
        b, n, c = windows.shape
        heads, hd = self.num_heads, self.head_dim
        if c != heads * hd:
            raise ConfigError(f"window tokens have {c} channels, attention expects {heads * hd}")

        def split(t: Tensor) -> Tensor:
            return t.reshape(b, n, heads, hd).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(windows)), split(self.k(windows)), split(self.v(windows))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
        idx = relative_position_index(tuple(window_sizes), self.window)
        if idx.shape[0] != n:
            raise ShapeError(f"window of {n} tokens does not match window sizes {window_sizes}")
        bias = take(self.bias_table, idx.reshape(-1), axis=0).reshape(n, n, heads).transpose(2, 0, 1)
        scores = scores + bias
        if mask is not None:
            scores = scores + mask[:, None, :, :]
        attn = ops.softmax_lastaxis(scores)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, c)
        return self.proj(out)


def window_attention(windows: Tensor, params: WindowAttention, window_sizes, attn_mask=None) -> Tensor:
    return params(windows, window_sizes, attn_mask)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class SwinLayer(Module):
    """One transformer layer: z' = (S)W-MSA(LN(z)) + z ; z'' = MLP(LN(z')) + z'."""

    def __init__(self, dim: int, num_heads: int, window: int, mlp_ratio: float, rng: np.random.Generator, shifted: bool = False, qkv_bias: bool = True):
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window, rng, qkv_bias)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(round(dim * mlp_ratio)), rng)
        self.window = window
        self.shifted = shifted

    def forward(self, grid: TokenGrid, shifted: bool | None = None) -> TokenGrid:
        shifted = self.shifted if shifted is None else shifted
        z = grid.values
        z = z + windowed_attention(self.attn, TokenGrid(grid.dims, self.norm1(z)), self.window, shifted)
        z = z + self.mlp(self.norm2(z))
        return TokenGrid(grid.dims, z)


def windowed_attention(attn: WindowAttention, grid: TokenGrid, window: int, shifted: bool) -> Tensor:
    """(S)W-MSA over an already-normalised grid; returns token values in grid order."""
    sizes, shifts = effective_window(grid.dims, window)
    if not shifted:
        shifts = (0, 0, 0)
    padded = _padded_dims(grid.dims, sizes)
    c = grid.channels
    x = grid.values.reshape(grid.dims + (c,))
    if padded != grid.dims:
        x = pad(x, [(0, p - n) for p, n in zip(padded, grid.dims)] + [(0, 0)])
    shifted_grid = cyclic_shift(TokenGrid(padded, x.reshape(-1, c)), shifts)
    windows, _ = window_partition(shifted_grid, window, sizes)
    record = _record_for(grid.dims, padded, sizes, shifts)
    out = attn(windows, sizes, attention_mask(record, shifts))
    back = window_reverse(out, PadRecord(padded, padded, sizes, record.pad_mask))
    back = cyclic_shift(back, tuple(-s for s in shifts))
    if padded == grid.dims:
        return back.values
    h, w, d = grid.dims
    return back.values.reshape(padded + (c,))[:h, :w, :d].reshape(-1, c)


def _record_for(dims, padded, sizes, shifts) -> PadRecord:
    flags = np.zeros(padded + (1,), dtype=bool)
    flags[dims[0] :] = True
    flags[:, dims[1] :] = True
    flags[:, :, dims[2] :] = True
    if any(shifts):
        flags = np.roll(flags, tuple(-s for s in shifts), (0, 1, 2))
    return PadRecord(tuple(dims), padded, sizes, _partition_array(flags, padded, sizes)[..., 0])


def swin_block(grid: TokenGrid, layer: SwinLayer, shifted: bool) -> TokenGrid:
    return layer(grid, shifted)


# -- embedding and merging ---------------------------------------------------

class PatchEmbed(Module):
    """2x2x2 voxel blocks -> tokens. Voxel order inside a block is row-major (dx, dy, dz)."""

    def __init__(self, embed_dim: int, rng: np.random.Generator, in_channels: int = 1):
        self.proj = Linear(8 * in_channels, embed_dim, rng)

    def forward(self, volume: Tensor) -> TokenGrid:
        return patch_partition(volume, self.proj)


def patch_partition(volume: Tensor, proj: Linear) -> TokenGrid:
    if volume.ndim != 5 or volume.shape[0] != 1:
        raise ShapeError(f"expected a (1, C, H, W, D) volume, got {volume.shape}")
    _, cin, hh, ww, dd = volume.shape
    if hh % 2 or ww % 2 or dd % 2:
        raise ShapeError(f"volume extents {volume.shape[2:]} must be even for 2x2x2 tokens")
    h, w, d = hh // 2, ww // 2, dd // 2
    x = volume.reshape(cin, h, 2, w, 2, d, 2).transpose(1, 3, 5, 0, 2, 4, 6).reshape(h * w * d, cin * 8)
    return TokenGrid((h, w, d), proj(x))


class PatchMerging(Module):
    """Concatenate each 2x2x2 token group (8C), layer-norm, project to 2C."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(8 * dim)
        self.reduction = Linear(8 * dim, 2 * dim, rng, bias=False)

    def gather(self, grid: TokenGrid) -> tuple[tuple[int, int, int], Tensor]:
        if min(grid.dims) < 2:
            raise ShapeError(f"cannot merge a grid with a 1-extent axis: {grid.dims}")
        c = grid.channels
        x = grid.values.reshape(grid.dims + (c,))
        odd = [(0, n % 2) for n in grid.dims]
        if any(hi for _, hi in odd):
            x = pad(x, odd + [(0, 0)], mode="edge")
        h, w, d = ((n + 1) // 2 for n in grid.dims)
        x = x.reshape(h, 2, w, 2, d, 2, c).transpose(0, 2, 4, 1, 3, 5, 6).reshape(h * w * d, 8 * c)
        return (h, w, d), x

    def forward(self, grid: TokenGrid) -> TokenGrid:
        dims, x = self.gather(grid)
        return TokenGrid(dims, self.reduction(self.norm(x)))


def patch_merge(grid: TokenGrid, merger: PatchMerging) -> TokenGrid:
    return merger(grid)


# -- encoder --------------------------------------------------------------

@dataclass
class SkipSet:
    """features[i] is a (1, C_i, H/2^i, W/2^i, D/2^i) tensor for i = 0..5."""

    features: list[Tensor]

    def __post_init__(self):
        if len(self.features) != 6:
            raise ShapeError(f"SkipSet needs 6 levels, got {len(self.features)}")
        for i in range(1, 6):
            prev, cur = self.features[i - 1].shape[2:], self.features[i].shape[2:]
            if any(p != 2 * c for p, c in zip(prev, cur)):
                raise ShapeError(f"skip {i} extent {cur} is not half of skip {i - 1} extent {prev}")

    def __getitem__(self, i: int) -> Tensor:
        return self.features[i]

    def __len__(self) -> int:
        return len(self.features)

    @property
    def bottleneck(self) -> Tensor:
        return self.features[5]

    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(f.shape[1:]) for f in self.features]


class Stage(Module):
    def __init__(self, dim: int, depth: int, num_heads: int, cfg: EncoderConfig, rng: np.random.Generator):
        self.layers = [
            SwinLayer(dim, num_heads, cfg.window, cfg.mlp_ratio, rng, shifted=bool(j % 2), qkv_bias=cfg.qkv_bias)
            for j in range(depth)
        ]
        self.merge = PatchMerging(dim, rng)

    def forward(self, grid: TokenGrid) -> TokenGrid:
        for layer in self.layers:
            grid = layer(grid)
        return self.merge(grid)


class SwinEncoder(Module):
    def __init__(self, config: EncoderConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config or EncoderConfig()
        rng = np.random.default_rng(0) if rng is None else rng
        cfg = self.config
        self.stem = CNNBlock(cfg.in_channels, cfg.stem_channels, rng)
        self.embed = PatchEmbed(cfg.embed_dim, rng, cfg.in_channels)
        self.stages = [
            Stage(cfg.embed_dim * 2**s, cfg.depths[s], cfg.num_heads[s], cfg, rng) for s in range(4)
        ]

    def forward(self, volume: Tensor) -> SkipSet:
        check_input_extent(volume.shape[2:])
        feats = [self.stem(volume)]
        grid = self.embed(volume)
        feats.append(grid.volume())
        for stage in self.stages:
            grid = stage(grid)
            feats.append(grid.volume())
        return SkipSet(feats)


def check_input_extent(spatial) -> None:
    if any(n % 32 for n in spatial):
        raise ShapeError(
            f"input extents {tuple(spatial)} must be divisible by 32; pad the volume first"
        )


def encode(volume: Tensor, encoder: SwinEncoder) -> SkipSet:
    return encoder(volume)


def skip_shapes(input_size, config: EncoderConfig) -> list[tuple[int, ...]]:
    """(C_i, h, w, d) for every skip level, without running the network."""
    if isinstance(input_size, int):
        input_size = (input_size,) * 3
    check_input_extent(input_size)
    return [
        (c,) + tuple(n // 2**i for n in input_size) for i, c in enumerate(config.skip_channels())
    ]
