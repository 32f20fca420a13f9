"""ViT encoder adapted for detection: windowed attention in all but four
evenly spaced global blocks, absolute position embeddings, shared relative
position biases, drop path, optional layer scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import DimensionError, InvalidInputError, Tensor


def default_global_indices(depth: int) -> tuple[int, ...]:
    """Four global blocks at d/4 intervals (0-indexed: d/4-1, ..., d-1)."""
    q = depth // 4
    return (q - 1, 2 * q - 1, 3 * q - 1, depth - 1)


@dataclass
class BackboneConfig:
    depth: int = 12
    embed_dim: int = 768
    num_heads: int = 12
    mlp_ratio: float = 4.0
    patch_size: int = 16
    window_size: int = 14
    img_size: int = 1024
    global_block_indices: tuple[int, ...] | None = None
    use_abs_pos: bool = True
    use_rel_pos: bool = True
    layer_scale_init: float | None = None
    drop_path_rate: float = 0.0
    in_channels: int = 3

    def __post_init__(self):
        if self.depth % 4:
            raise InvalidInputError("depth must be divisible by 4")
        if self.embed_dim % self.num_heads:
            raise InvalidInputError("num_heads must divide embed_dim")
        if self.window_size < 1:
            raise InvalidInputError("window_size must be >= 1")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise InvalidInputError("drop_path_rate must lie in [0, 1)")
        if self.img_size % self.patch_size:
            raise InvalidInputError("img_size must be divisible by patch_size")
        if self.global_block_indices is None:
            self.global_block_indices = default_global_indices(self.depth)
        else:
            self.global_block_indices = tuple(sorted(self.global_block_indices))

    @property
    def grid_size(self) -> int:
        return self.img_size // self.patch_size

    @property
    def tap_indices(self) -> tuple[int, ...]:
        """Blocks after which features are tapped for the pyramid (0-indexed)."""
        return default_global_indices(self.depth)


@dataclass
class PatchGrid:
    """Token grid: tokens laid out as [N, h, w, C]."""

    tokens: Tensor
    h: int
    w: int

    def __post_init__(self):
        n, h, w, _ = self.tokens.shape
        if (h, w) != (self.h, self.w):
            raise DimensionError(f"token grid {h}x{w} != declared {self.h}x{self.w}")

    @property
    def flat(self) -> Tensor:
        n, h, w, c = self.tokens.shape
        return self.tokens.reshape(n, h * w, c)

    def as_map(self) -> Tensor:
        """Return channels-first feature map [N, C, h, w]."""
        return self.tokens.transpose(0, 3, 1, 2)


def window_partition(grid: PatchGrid, r: int):
    """Split into non-overlapping r x r windows, zero-padding bottom/right.

    Returns (windows [N*nw, r*r, C], pad_hw) where pad_hw is the padded grid
    extent; window_unpartition inverts exactly by cropping the padding.
    """
    if r < 1:
        raise InvalidInputError("window size must be >= 1")
    x = grid.tokens
    n, h, w, c = x.shape
    hp = int(math.ceil(h / r)) * r
    wp = int(math.ceil(w / r)) * r
    if (hp, wp) != (h, w):
        x = T.pad(x, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)))
    x = x.reshape(n, hp // r, r, wp // r, r, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    windows = x.reshape(n * (hp // r) * (wp // r), r * r, c)
    return windows, (hp, wp)


def window_unpartition(windows: Tensor, r: int, pad_hw, hw, n: int) -> PatchGrid:
    """Inverse of window_partition; crops the bottom/right padding."""
    hp, wp = pad_hw
    h, w = hw
    c = windows.shape[-1]
    x = windows.reshape(n, hp // r, wp // r, r, r, c)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(n, hp, wp, c)
    if (hp, wp) != (h, w):
        x = x[:, :h, :w, :]
    return PatchGrid(x, h, w)


def rel_bias_lookup(table: Tensor, a: int, b: int) -> Tensor:
    """Gather per-head biases for an a x b attention extent.

    bias[head, q, k] = table[head, drow(q,k) + a - 1, dcol(q,k) + b - 1].
    """
    heads, rows, cols = table.shape
    if rows < 2 * a - 1 or cols < 2 * b - 1:
        raise DimensionError(
            f"relative bias table {rows}x{cols} too small for extent {a}x{b}")
    coords = np.stack(np.meshgrid(np.arange(a), np.arange(b), indexing="ij"), axis=-1).reshape(-1, 2)
    d = coords[:, None, :] - coords[None, :, :]  # [ab, ab, 2] offsets
    idx = (d[..., 0] + a - 1) * cols + (d[..., 1] + b - 1)
    return T.gather(table.reshape(heads, rows * cols), idx, axis=-1)


def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Per-sample stochastic depth; survivors scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise InvalidInputError("drop path rate must lie in [0, 1)")
    if rate == 0.0 or not training:
        return x
    if rng is None:
        raise InvalidInputError("drop_path in training mode requires an rng")
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(shape) < keep).astype(x.data.dtype) / keep
    return x * Tensor(mask)


class Attention(nn.Module):
    """Multi-head scaled dot-product attention over an a x b token extent."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        self.qkv = nn.Linear(dim, 3 * dim, rng)
        self.proj = nn.Linear(dim, dim, rng)
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5

    def __call__(self, x: Tensor, a: int, b: int, rel_table: Tensor | None = None) -> Tensor:
        bsz, t, c = x.shape
        if t != a * b:
            raise DimensionError(f"token count {t} != extent {a}x{b}")
        qkv = self.qkv(x).reshape(bsz, t, 3, self.num_heads, self.head_dim)
        qkv = qkv.transpose(2, 0, 3, 1, 4)  # [3, B, heads, T, hd]
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ k.transpose(0, 1, 3, 2)
        if rel_table is not None:
            logits = logits + rel_bias_lookup(rel_table, a, b)
        attn = T.softmax(logits, -1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(bsz, t, c)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block; attention is windowed unless ``is_global``."""

    def __init__(self, cfg: BackboneConfig, is_global: bool, rng: np.random.Generator):
        dim = cfg.embed_dim
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, cfg.num_heads, rng)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Mlp(dim, int(dim * cfg.mlp_ratio), rng)
        self.is_global = is_global
        self.window_size = cfg.window_size
        if cfg.layer_scale_init is not None:
            init = np.full(dim, cfg.layer_scale_init, dtype=np.float32)
            self.gamma1 = Tensor(init.copy(), requires_grad=True)
            self.gamma2 = Tensor(init.copy(), requires_grad=True)
        else:
            self.gamma1 = self.gamma2 = None

    def __call__(self, grid: PatchGrid, rel_table: Tensor | None, dp_rate: float,
                 training: bool, rng: np.random.Generator | None) -> PatchGrid:
        x = grid.tokens
        n, h, w, c = x.shape
        y = self.norm1(x)
        if self.is_global:
            y = self.attn(y.reshape(n, h * w, c), h, w, rel_table).reshape(n, h, w, c)
        else:
            r = self.window_size
            windows, pad_hw = window_partition(PatchGrid(y, h, w), r)
            y = self.attn(windows, r, r, rel_table)
            y = window_unpartition(y, r, pad_hw, (h, w), n).tokens
        if self.gamma1 is not None:
            y = y * self.gamma1
        x = x + drop_path(y, dp_rate, training, rng)
        y = self.mlp(self.norm2(x))
        if self.gamma2 is not None:
            y = y * self.gamma2
        x = x + drop_path(y, dp_rate, training, rng)
        return PatchGrid(x, h, w)


class ViTBackbone(nn.Module):
    """Patch embedding plus ``depth`` transformer blocks with pyramid taps.

    Relative position bias tables are shared: one across all windowed blocks
    (sized for the r x r window extent) and one across all global blocks
    (sized for the full patch grid).
    """

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        c = cfg.embed_dim
        self.patch_embed = nn.Conv2d(cfg.in_channels, c, cfg.patch_size, rng,
                                     stride=cfg.patch_size)
        g = cfg.grid_size
        if cfg.use_abs_pos:
            self.abs_pos = Tensor(nn.trunc_normal(rng, (1, g, g, c)), requires_grad=True)
        else:
            self.abs_pos = None
        if cfg.use_rel_pos:
            r = cfg.window_size
            self.rel_table_windowed = Tensor(
                np.zeros((cfg.num_heads, 2 * r - 1, 2 * r - 1), dtype=np.float32), requires_grad=True)
            self.rel_table_global = Tensor(
                np.zeros((cfg.num_heads, 2 * g - 1, 2 * g - 1), dtype=np.float32), requires_grad=True)
        else:
            self.rel_table_windowed = self.rel_table_global = None
        self.blocks = [Block(cfg, i in cfg.global_block_indices, rng) for i in range(cfg.depth)]
        self.checkpoint_blocks = False  # recompute each block in backward when set

    # -- ops -----------------------------------------------------------------

    def patchify(self, image: Tensor) -> PatchGrid:
        """Project P x P patches to embed_dim; adds absolute position embeddings."""
        n, c, h, w = image.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise DimensionError(f"image extent {h}x{w} not divisible by patch size {p}")
        tokens = self.patch_embed(image).transpose(0, 2, 3, 1)  # [N, h, w, C]
        gh, gw = h // p, w // p
        if self.abs_pos is not None:
            if self.abs_pos.shape[1] != gh or self.abs_pos.shape[2] != gw:
                raise DimensionError(
                    f"abs-pos grid {self.abs_pos.shape[1]}x{self.abs_pos.shape[2]} != input grid "
                    f"{gh}x{gw}; resize the checkpoint before loading")
            tokens = tokens + self.abs_pos
        return PatchGrid(tokens, gh, gw)

    def _block_rel_table(self, block: Block) -> Tensor | None:
        if not self.cfg.use_rel_pos:
            return None
        return self.rel_table_global if block.is_global else self.rel_table_windowed

    def block_forward(self, grid: PatchGrid, block_index: int, training: bool = False,
                      rng: np.random.Generator | None = None) -> PatchGrid:
        if not 0 <= block_index < self.cfg.depth:
            raise InvalidInputError(f"block index {block_index} out of range")
        block = self.blocks[block_index]
        table = self._block_rel_table(block)
        dp = self.cfg.drop_path_rate
        if self.checkpoint_blocks:
            h, w = grid.h, grid.w
            fn = lambda x: block(PatchGrid(x, h, w), table, dp, training, rng).tokens
            return PatchGrid(T.checkpoint_segment(fn, grid.tokens, rng=rng), h, w)
        return block(grid, table, dp, training, rng)

    def forward(self, image: Tensor, mode: str = "eval",
                rng: np.random.Generator | None = None):
        """Run the encoder; returns (final PatchGrid, taps).

        ``taps`` maps tap position (0..3, at blocks d/4, d/2, 3d/4, d) to a
        channels-first feature map [N, C, h, w].
        """
        if mode not in ("train", "eval"):
            raise InvalidInputError(f"unknown mode: {mode}")
        training = mode == "train"
        if training and self.cfg.drop_path_rate > 0.0 and rng is None:
            raise InvalidInputError("training with drop path requires an rng")
        grid = self.patchify(image)
        taps = {}
        tap_at = {idx: pos for pos, idx in enumerate(self.cfg.tap_indices)}
        for i in range(self.cfg.depth):
            grid = self.block_forward(grid, i, training, rng)
            if i in tap_at:
                taps[tap_at[i]] = grid.as_map()
        return grid, taps

    def __call__(self, image: Tensor, mode: str = "eval",
                 rng: np.random.Generator | None = None):
        return self.forward(image, mode, rng)
