"""Checkpoint container, positional-parameter resizing, and transfer rules.

File format (little-endian throughout): 8-byte magic "VITDETCK", u32 version,
u64 entry count, then per entry: u32 name length, UTF-8 name, u8 dtype code
(0 = f32, 1 = f64), u8 rank, rank x u64 extents, raw row-major data. Metadata
lives in a JSON sidecar at <path>.meta.json.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .backbone import BackboneConfig, ViTBackbone
from .data import bilinear_resize
from .tensor import Tensor

MAGIC = b"VITDETCK"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.float32, 1: np.float64}


class FormatError(ValueError):
    """Corrupt or inconsistent checkpoint file."""


class TransferError(ValueError):
    """Checkpoint and target configuration are incompatible."""


@dataclass
class Checkpoint:
    """Named parameter store with positional-kind metadata."""

    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def has_abs_pos(self) -> bool:
        return bool(self.metadata.get("has_abs_pos", "abs_pos" in self.params))

    @property
    def has_rel_pos(self) -> bool:
        return bool(self.metadata.get("has_rel_pos", "rel_table_windowed" in self.params))

    @property
    def has_layer_scale(self) -> bool:
        return bool(self.metadata.get("has_layer_scale",
                                      any("gamma" in k for k in self.params)))

    @property
    def pretrain_grid(self) -> tuple[int, int]:
        g = self.metadata.get("pretrain_grid")
        return tuple(g) if g else (0, 0)


def save(params: dict[str, np.ndarray | Tensor], path: str | Path, metadata: dict | None = None):
    """Write a checkpoint; bit-exact round trip with load()."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(params)))
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            if arr.dtype not in _DTYPE_CODES:
                raise FormatError(f"entry {name}: unsupported dtype {arr.dtype}")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    meta = dict(metadata or {})
    meta.setdefault("format_version", VERSION)
    with open(str(path) + ".meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return buf


def load(path: str | Path) -> Checkpoint:
    """Read a checkpoint, validating magic, version, and entry lengths."""
    path = Path(path)
    params: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if _read_exact(f, 8, "magic") != MAGIC:
            raise FormatError("bad magic; not a checkpoint file")
        version, count = struct.unpack("<IQ", _read_exact(f, 12, "header"))
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(f, 2, f"entry {name} header"))
            if code not in _CODE_DTYPES:
                raise FormatError(f"entry {name}: unknown dtype code {code}")
            shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, f"entry {name} shape"))
            dtype = np.dtype(_CODE_DTYPES[code]).newbyteorder("<")
            nbytes = int(np.prod(shape)) * dtype.itemsize if rank else dtype.itemsize
            if rank == 0:
                shape = ()
                nbytes = dtype.itemsize
            raw = _read_exact(f, nbytes, f"entry {name} data")
            params[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(
                _CODE_DTYPES[code])
    meta_path = str(path) + ".meta.json"
    metadata = {}
    if Path(meta_path).exists():
        with open(meta_path) as f:
            metadata = json.load(f)
    return Checkpoint(params, metadata, version=VERSION)


# --------------------------------------------------------------------------
# positional-parameter resizing (bilinear, corners aligned)
# --------------------------------------------------------------------------

def resize_abs_pos(embed: np.ndarray, target: tuple[int, int],
                   src: tuple[int, int] | None = None) -> np.ndarray:
    """Resize [h0*w0, C] absolute position embeddings to [h1*w1, C].

    The source grid defaults to square (inferred from the token count).
    Identity when the extents already match (bitwise).
    """
    t, c = embed.shape
    if src is None:
        side = int(round(math.sqrt(t)))
        if side * side != t:
            raise TransferError(f"cannot infer square grid from {t} tokens")
        src = (side, side)
    h0, w0 = src
    h1, w1 = target
    if h0 * w0 != t:
        raise TransferError(f"embed rows {t} != grid {h0}x{w0}")
    if (h0, w0) == (h1, w1):
        return embed.copy()
    grid = embed.reshape(h0, w0, c).transpose(2, 0, 1)
    out = bilinear_resize(grid, h1, w1)
    return out.transpose(1, 2, 0).reshape(h1 * w1, c)


def resize_rel_bias(table: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Resize [heads, 2a0-1, 2b0-1] relative bias tables to a new extent.

    Corner-aligned bilinear over the offset grid keeps the zero-offset center
    at the center; identity resizes are bitwise exact.
    """
    heads, rows, cols = table.shape
    a1, b1 = target
    if (rows, cols) == (2 * a1 - 1, 2 * b1 - 1):
        return table.copy()
    return bilinear_resize(table, 2 * a1 - 1, 2 * b1 - 1)


# --------------------------------------------------------------------------
# initialization modes
# --------------------------------------------------------------------------

def random_init(cfg: BackboneConfig, seed: int) -> dict[str, np.ndarray]:
    """Backbone parameters from scratch: truncated normal (std 0.02, clipped
    at 2 std) for weights and absolute positions, zeros for biases and
    relative bias tables, ones for norm scales."""
    model = ViTBackbone(cfg, seed=seed)
    return {name: p.data.copy() for name, p in model.named_parameters()}


def checkpoint_metadata(cfg: BackboneConfig, provenance: str) -> dict:
    return {
        "has_abs_pos": cfg.use_abs_pos,
        "has_rel_pos": cfg.use_rel_pos,
        "has_layer_scale": cfg.layer_scale_init is not None,
        "pretrain_grid": [cfg.grid_size, cfg.grid_size],
        "provenance": provenance,
        "depth": cfg.depth,
        "embed_dim": cfg.embed_dim,
        "num_heads": cfg.num_heads,
        "patch_size": cfg.patch_size,
        "window_size": cfg.window_size,
    }


def apply_transfer_rules(ckpt: Checkpoint, cfg: BackboneConfig, seed: int = 0):
    """Initialize a target backbone from a checkpoint.

    Rules: pre-trained absolute positions transfer (resized on grid mismatch)
    with relative biases zero-initialized; pre-trained relative biases
    transfer (resized) with absolute positions randomly initialized; layer
    scale transfers iff present. Returns (params, report) where report maps
    every target parameter to its source: pretrained, pretrained-resized,
    zero, or random.
    """
    for key in ("depth", "embed_dim", "num_heads", "patch_size"):
        want = getattr(cfg, key)
        have = ckpt.metadata.get(key)
        if have is not None and have != want:
            raise TransferError(f"checkpoint/config mismatch on {key}: {have} != {want}")
    if cfg.layer_scale_init is None and ckpt.has_layer_scale:
        raise TransferError("checkpoint carries layer scale; enable layer_scale_init in the target")

    params = random_init(cfg, seed)
    report = {name: "random" for name in params}
    for name in params:
        if "rel_table" in name:
            report[name] = "zero"  # tables start at zero in random init
    grid = cfg.grid_size
    h0, w0 = ckpt.pretrain_grid

    for name, value in ckpt.params.items():
        if name == "abs_pos":
            continue
        if name.startswith("rel_table"):
            continue
        if name not in params:
            continue  # e.g. pretext decoder parameters
        if params[name].shape != value.shape:
            raise TransferError(f"entry {name}: shape {value.shape} != {params[name].shape}")
        params[name] = value.astype(np.float32)
        report[name] = "pretrained"

    if ckpt.has_abs_pos and cfg.use_abs_pos:
        embed = ckpt.params["abs_pos"]
        if embed.ndim == 4:  # [1, h, w, C]
            _, eh, ew, ec = embed.shape
            flat = embed.reshape(eh * ew, ec)
            src = (eh, ew)
        else:  # [tokens(+class), C]
            flat = embed
            src = (h0, w0) if h0 else None
            if src and flat.shape[0] == src[0] * src[1] + 1:
                flat = flat[1:]  # drop the class-token row
            elif flat.shape[0] == int(round(math.sqrt(flat.shape[0] - 1))) ** 2 + 1:
                flat = flat[1:]
            if src is None:
                side = int(round(math.sqrt(flat.shape[0])))
                src = (side, side)
        resized = resize_abs_pos(flat.astype(np.float32), (grid, grid), src)
        params["abs_pos"] = resized.reshape(1, grid, grid, cfg.embed_dim)
        report["abs_pos"] = "pretrained" if src == (grid, grid) else "pretrained-resized"

    if ckpt.has_rel_pos and cfg.use_rel_pos:
        for name, extent in (("rel_table_windowed", cfg.window_size),
                             ("rel_table_global", grid)):
            if name not in ckpt.params:
                continue
            table = ckpt.params[name].astype(np.float32)
            resized = resize_rel_bias(table, (extent, extent))
            params[name] = resized
            report[name] = ("pretrained" if table.shape == resized.shape
                            else "pretrained-resized")

    return params, report


def build_from_checkpoint(ckpt: Checkpoint, cfg: BackboneConfig, seed: int = 0) -> ViTBackbone:
    """Convenience wrapper: transfer rules applied onto a fresh backbone."""
    params, _ = apply_transfer_rules(ckpt, cfg, seed)
    model = ViTBackbone(cfg, seed=seed)
    model.load_param_dict(params)
    return model
