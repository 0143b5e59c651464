"""Volume (VVOL) and checkpoint files, plus PGM/PPM slice export.

VVOL layout (little-endian)::

    offset 0   5 bytes   magic b"VVOL1"
    offset 5   3 x u32   dims H, W, D
    offset 17  u32       channels
    offset 21  u8        dtype tag (0 = f32, 1 = f64, 2 = u16)
    offset 22  3 x f64   spacing
    offset 46  payload   C-order (channels, H, W, D)

Checkpoint layout::

    b"UFCKPT" | u32 version | u64 manifest length | manifest JSON | payload

The manifest lists every tensor's name, shape, byte offset and length inside
the payload; tensors are stored as little-endian f64 like VVOL volumes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

VVOL_MAGIC = b"VVOL1"
_VVOL_FIELDS = struct.Struct("<3IIB3d")
VVOL_HEADER_SIZE = len(VVOL_MAGIC) + _VVOL_FIELDS.size
DTYPES = {"f32": (0, np.dtype("<f4")), "f64": (1, np.dtype("<f8")), "u16": (2, np.dtype("<u2"))}
_TAGS = {tag: name for name, (tag, _) in DTYPES.items()}

CKPT_MAGIC = b"UFCKPT"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<IQ")


class VVolError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.chmod(tmp, 0o666 & ~_umask())  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- VVOL ---------------------------------------------------------------------

@dataclass
class VVolHeader:
    dims: tuple[int, int, int]
    channels: int = 1
    dtype: str = "f64"
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def payload_bytes(self) -> int:
        return int(np.prod(self.dims)) * self.channels * DTYPES[self.dtype][1].itemsize


def write_vvol(path: str | Path, volume: np.ndarray, header: VVolHeader | None = None) -> VVolHeader:
    """Write a (H, W, D) or (C, H, W, D) array."""
    arr = np.asarray(volume)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise VVolError(f"volume must be 3-D or 4-D, got shape {arr.shape}")
    if header is None:
        kind = "u16" if arr.dtype.kind in "iub" else "f64"
        header = VVolHeader(tuple(arr.shape[1:]), arr.shape[0], kind)
    if tuple(header.dims) != arr.shape[1:] or header.channels != arr.shape[0]:
        raise VVolError(f"header dims {header.dims}x{header.channels} do not match array {arr.shape}")
    tag, dt = DTYPES[header.dtype]
    if header.dtype == "u16":
        if arr.size and (arr.min() < 0 or arr.max() > 65535 or np.any(arr != np.round(arr))):
            raise VVolError("u16 volumes must hold integers in [0, 65535]")
    body = np.ascontiguousarray(arr.astype(dt)).tobytes()
    head = VVOL_MAGIC + _VVOL_FIELDS.pack(*header.dims, header.channels, tag, *header.spacing)
    atomic_write(path, head + body)
    return header


def read_vvol(path: str | Path) -> tuple[np.ndarray, VVolHeader]:
    """Returns a (C, H, W, D) array in the stored dtype and its header."""
    raw = Path(path).read_bytes()
    if len(raw) < VVOL_HEADER_SIZE:
        raise VVolError(f"file is {len(raw)} bytes, shorter than the {VVOL_HEADER_SIZE}-byte header")
    if raw[:5] != VVOL_MAGIC:
        raise VVolError(f"bad magic at byte offset 0: {raw[:5]!r} (expected {VVOL_MAGIC!r})")
    h, w, d, c, tag, sx, sy, sz = _VVOL_FIELDS.unpack_from(raw, 5)
    if tag not in _TAGS:
        raise VVolError(f"unknown dtype tag {tag} at byte offset 21")
    header = VVolHeader((h, w, d), c, _TAGS[tag], (sx, sy, sz))
    actual = len(raw) - VVOL_HEADER_SIZE
    if actual != header.payload_bytes:
        raise VVolError(
            f"payload at byte offset {VVOL_HEADER_SIZE}: expected {header.payload_bytes} bytes, found {actual}"
        )
    arr = np.frombuffer(raw, dtype=DTYPES[header.dtype][1], offset=VVOL_HEADER_SIZE).reshape((c, h, w, d))
    return arr.copy(), header


# -- checkpoints -----------------------------------------------------------

@dataclass
class TransferReport:
    matched: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    unexpected: list[str] = field(default_factory=list)
    shape_mismatch: list[str] = field(default_factory=list)


@dataclass
class Checkpoint:
    version: int
    config: dict
    tensors: dict[str, np.ndarray]
    rng_state: dict | None = None
    step: int = 0


def model_config(model) -> dict:
    cfg = {"model": type(model).__name__, "encoder": asdict(model.enc_config)}
    dec = getattr(model, "dec_config", None)
    cfg["decoder"] = asdict(dec) if dec is not None else None
    return cfg


def save_checkpoint(path: str | Path, model, step: int = 0, rng_state: dict | None = None, train_config=None) -> None:
    config = model_config(model)
    if train_config is not None:
        config["train"] = json.loads(json.dumps(asdict(train_config), default=list))
    entries, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        buf = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    manifest = {"version": CKPT_VERSION, "config": config, "step": int(step), "rng_state": rng_state, "tensors": entries}
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    atomic_write(path, CKPT_MAGIC + _CKPT_PREFIX.pack(CKPT_VERSION, len(mbytes)) + mbytes + b"".join(chunks))


def read_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    head = len(CKPT_MAGIC) + _CKPT_PREFIX.size
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = _CKPT_PREFIX.unpack_from(raw, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    manifest = json.loads(raw[head : head + mlen])
    payload = memoryview(raw)[head + mlen :]
    tensors = {}
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        expected = int(np.prod(shape)) * 8
        start, n = entry["offset"], entry["nbytes"]
        if n != expected or start + n > len(payload):
            raise CheckpointError(
                f"tensor {name!r}: expected {expected} bytes for shape {shape}, "
                f"manifest says {n} at payload offset {start}, payload holds {len(payload)}"
            )
        tensors[name] = np.frombuffer(payload[start : start + n], dtype="<f8").reshape(shape).copy()
    return Checkpoint(version, manifest["config"], tensors, manifest.get("rng_state"), manifest.get("step", 0))


def load_into(model, ckpt: Checkpoint, strict: bool = True) -> TransferReport:
    """Copy tensors into ``model`` by parameter name.

    Strict mode requires identical name sets and shapes. Otherwise names present
    in both with equal shapes are loaded and the rest is reported.
    """
    params = dict(model.named_parameters())
    rep = TransferReport()
    for name, p in params.items():
        if name not in ckpt.tensors:
            rep.missing.append(name)
        elif ckpt.tensors[name].shape != p.shape:
            rep.shape_mismatch.append(name)
        else:
            rep.matched.append(name)
    rep.unexpected = [n for n in ckpt.tensors if n not in params]
    if strict and (rep.missing or rep.unexpected or rep.shape_mismatch):
        raise CheckpointError(
            f"strict load failed: missing={rep.missing[:5]} unexpected={rep.unexpected[:5]} "
            f"shape_mismatch={rep.shape_mismatch[:5]}"
        )
    for name in rep.matched:
        params[name].data = ckpt.tensors[name].copy()
    return rep


def load_checkpoint(path: str | Path, model, strict: bool = True) -> TransferReport:
    return load_into(model, read_checkpoint(path), strict)


def transfer_encoder(path: str | Path, model) -> TransferReport:
    """Fine-tuning hand-off: load only ``encoder.*`` tensors, leave the decoder fresh."""
    ckpt = read_checkpoint(path)
    enc = Checkpoint(ckpt.version, ckpt.config, {k: v for k, v in ckpt.tensors.items() if k.startswith("encoder.")})
    rep = load_into(model, enc, strict=False)
    rep.unexpected = [k for k in ckpt.tensors if k not in dict(model.named_parameters())]
    if rep.shape_mismatch:
        raise CheckpointError(f"encoder shape mismatch: {rep.shape_mismatch[:5]}")
    return rep


def build_model(config: dict, seed: int = 0):
    from .decoders import DecoderConfig, UNetFormer
    from .pretrain import MaskedVolumeModel
    from .swin import EncoderConfig

    enc = EncoderConfig(**config["encoder"])
    if config["model"] == "MaskedVolumeModel":
        return MaskedVolumeModel(enc, seed=seed)
    return UNetFormer(enc, DecoderConfig(**config["decoder"]), seed=seed)


def load_model(path: str | Path):
    ckpt = read_checkpoint(path)
    model = build_model(ckpt.config)
    load_into(model, ckpt, strict=True)
    return model


# -- slice images ------------------------------------------------------------

PALETTE = np.array(
    [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
    ],
    dtype=np.uint8,
)


def _slice(volume: np.ndarray, axis: int, index: int) -> np.ndarray:
    vol = np.asarray(volume)
    while vol.ndim > 3:
        vol = vol[0]
    if not 0 <= axis < 3:
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < vol.shape[axis]:
        raise IndexError(f"slice index {index} outside [0, {vol.shape[axis]}) on axis {axis}")
    return np.take(vol, index, axis=axis)


def to_gray(plane: np.ndarray) -> np.ndarray:
    lo, hi = float(plane.min()), float(plane.max())
    if hi <= lo:
        return np.full(plane.shape, 128, dtype=np.uint8)
    return np.round((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)


def dump_slice(volume, axis: int, index: int, path: str | Path, mode: str = "gray", labels=None) -> Path:
    """Write one slice as binary PGM (``gray``) or PPM (``labels-overlay``).

    In overlay mode ``labels`` (same spatial shape) colours each class with a
    fixed palette; without labels the volume itself is treated as the label map.
    Foreground classes are blended 50/50 over the grey image when both are given.
    """
    path = Path(path)
    if mode == "gray":
        plane = to_gray(_slice(volume, axis, index))
        h, w = plane.shape
        atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + plane.tobytes())
        return path
    if mode != "labels-overlay":
        raise ValueError(f"unknown slice mode {mode!r}")
    if labels is None:
        lab = _slice(volume, axis, index).astype(np.int64)
        rgb = PALETTE[lab % len(PALETTE)]
    else:
        lab = _slice(labels, axis, index).astype(np.int64)
        gray = to_gray(_slice(volume, axis, index))
        rgb = np.repeat(gray[..., None], 3, axis=2).astype(np.float64)
        fg = lab > 0
        rgb[fg] = 0.5 * rgb[fg] + 0.5 * PALETTE[lab[fg] % len(PALETTE)]
        rgb = np.round(rgb).astype(np.uint8)
    h, w = rgb.shape[:2]
    atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
    return path


def read_pnm(path: str | Path) -> np.ndarray:
    """Minimal reader for the binary PGM/PPM files written above."""
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if int(maxval) != 255:
        raise ValueError("only maxval 255 is supported")
    if magic == b"P5":
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    raise ValueError(f"unsupported PNM magic {magic!r}")
