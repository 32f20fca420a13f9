"""Synthetic-shapes dataset, large-scale jitter, square padding, and
masked-patch pretext sample generation.

All randomness flows through explicit numpy Generators: identical seeds give
identical pipelines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import InvalidInputError

NUM_CLASSES = 3  # rectangle, disk, triangle


@dataclass
class Sample:
    """Image in [0,1] with pixel-space boxes; boxes stay inside the canvas."""

    image: np.ndarray  # [3, H, W] float32
    boxes: list[tuple[float, float, float, float]]
    labels: list[int]
    seed: int = 0

    def validate(self):
        _, h, w = self.image.shape
        for (x1, y1, x2, y2) in self.boxes:
            if not (0 <= x1 <= x2 <= w and 0 <= y1 <= y2 <= h):
                raise InvalidInputError(f"box {(x1, y1, x2, y2)} outside {w}x{h} canvas")


@dataclass
class ShapesConfig:
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 5
    min_size: int = 10
    max_size: int = 28
    noise_level: float = 0.25


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of [C, H, W]; corners map to corners (align_corners)."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def gen_shapes_sample(rng: np.random.Generator, cfg: ShapesConfig | None = None,
                      seed: int | None = None) -> Sample:
    """Render 1-5 hard-edged shapes (3 classes) on a noise background.

    Deterministic given the generator state; pass ``seed`` to record it.
    """
    cfg = cfg or ShapesConfig()
    s = cfg.image_size
    img = rng.random((3, s, s)).astype(np.float32) * cfg.noise_level
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    boxes, labels = [], []
    yy, xx = np.mgrid[0:s, 0:s]
    for _ in range(n_obj):
        cls = int(rng.integers(0, NUM_CLASSES))
        size = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        x1 = int(rng.integers(0, s - size))
        y1 = int(rng.integers(0, s - size))
        x2, y2 = x1 + size, y1 + size
        color = 0.5 + 0.5 * rng.random(3).astype(np.float32)
        if cls == 0:  # rectangle
            mask = (yy >= y1) & (yy < y2) & (xx >= x1) & (xx < x2)
        elif cls == 1:  # disk
            cy, cx, rad = (y1 + y2) / 2, (x1 + x2) / 2, size / 2
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad
        else:  # triangle (axis-aligned right triangle)
            mask = (yy >= y1) & (yy < y2) & (xx >= x1) & ((xx - x1) <= (yy - y1))
        img[:, mask] = color[:, None]
        boxes.append((float(x1), float(y1), float(x2), float(y2)))
        labels.append(cls)
    sample = Sample(img, boxes, labels, seed=seed if seed is not None else 0)
    sample.validate()
    return sample


def lsj(sample: Sample, rng: np.random.Generator, resolution: int,
        scale_range: tuple[float, float] = (0.1, 2.0)) -> Sample:
    """Large-scale jitter: scale by s ~ U[lo, hi], then crop or place into an
    R x R zero-padded canvas. Boxes follow the affine transform exactly;
    degenerate boxes (area < 1 px^2) are dropped.
    """
    lo, hi = scale_range
    if not 0 < lo <= hi:
        raise InvalidInputError(f"invalid scale range: {scale_range}")
    s = float(rng.uniform(lo, hi))
    _, h, w = sample.image.shape
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    resized = bilinear_resize(sample.image, nh, nw)
    sy, sx = nh / h, nw / w

    canvas = np.zeros((3, resolution, resolution), dtype=np.float32)
    # crop when larger, place at a random offset when smaller (per axis)
    oy = int(rng.integers(0, abs(nh - resolution) + 1))
    ox = int(rng.integers(0, abs(nw - resolution) + 1))
    if nh >= resolution:
        src_y, dst_y, span_y = oy, 0, resolution
    else:
        src_y, dst_y, span_y = 0, oy, nh
    if nw >= resolution:
        src_x, dst_x, span_x = ox, 0, resolution
    else:
        src_x, dst_x, span_x = 0, ox, nw
    canvas[:, dst_y:dst_y + span_y, dst_x:dst_x + span_x] = \
        resized[:, src_y:src_y + span_y, src_x:src_x + span_x]

    shift_x = dst_x - src_x
    shift_y = dst_y - src_y
    boxes, labels = [], []
    for (x1, y1, x2, y2), lab in zip(sample.boxes, sample.labels):
        nx1 = np.clip(x1 * sx + shift_x, 0, resolution)
        nx2 = np.clip(x2 * sx + shift_x, 0, resolution)
        ny1 = np.clip(y1 * sy + shift_y, 0, resolution)
        ny2 = np.clip(y2 * sy + shift_y, 0, resolution)
        if (nx2 - nx1) * (ny2 - ny1) >= 1.0:
            boxes.append((float(nx1), float(ny1), float(nx2), float(ny2)))
            labels.append(lab)
    out = Sample(canvas, boxes, labels, seed=sample.seed)
    out.validate()
    return out


def pad_input(image: np.ndarray, mode: str, resolution: int, patch_size: int = 16) -> np.ndarray:
    """Pad with zeros to the training resolution or to the next patch multiple."""
    _, h, w = image.shape
    if h > resolution or w > resolution:
        raise InvalidInputError(f"image {h}x{w} exceeds resolution {resolution}")
    if mode == "train_resolution":
        th, tw = resolution, resolution
    elif mode == "patch_multiple":
        th = -(-h // patch_size) * patch_size
        tw = -(-w // patch_size) * patch_size
    else:
        raise InvalidInputError(f"unknown padding mode: {mode}")
    out = np.zeros((image.shape[0], th, tw), dtype=image.dtype)
    out[:, :h, :w] = image
    return out


def mask_patches(image: np.ndarray, mask_ratio: float, rng: np.random.Generator,
                 patch_size: int, eps: float = 1e-6):
    """Pick ceil(ratio * hw) random patches to mask; targets are the masked
    patches' pixels standardized to zero mean / unit variance per patch.

    Returns (visible_idx, masked_idx, targets [n_masked, P*P*C]).
    """
    if not 0.0 < mask_ratio < 1.0:
        raise InvalidInputError("mask_ratio must lie in (0, 1)")
    c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise InvalidInputError("image extent not divisible by patch size")
    gh, gw = h // patch_size, w // patch_size
    n = gh * gw
    n_masked = int(np.ceil(mask_ratio * n))
    perm = rng.permutation(n)
    masked_idx = np.sort(perm[:n_masked])
    visible_idx = np.sort(perm[n_masked:])
    patches = image.reshape(c, gh, patch_size, gw, patch_size)
    patches = patches.transpose(1, 3, 0, 2, 4).reshape(n, -1)
    sel = patches[masked_idx]
    mu = sel.mean(axis=1, keepdims=True)
    sd = sel.std(axis=1, keepdims=True)
    targets = (sel - mu) / np.sqrt(sd * sd + eps)
    return visible_idx, masked_idx, targets.astype(np.float32)


class ShapesDataset:
    """Deterministic (seed, index) -> Sample mapping over synthetic shapes."""

    def __init__(self, cfg: ShapesConfig, seed: int, size: int):
        self.cfg = cfg
        self.seed = seed
        self.size = size

    def __len__(self):
        return self.size

    def __getitem__(self, index: int) -> Sample:
        rng = np.random.default_rng((self.seed, index))
        return gen_shapes_sample(rng, self.cfg, seed=self.seed)


def export_sample(sample: Sample, path_prefix: str):
    """Write a sample as PNG + JSON annotations for inspection."""
    from PIL import Image

    arr = (np.clip(sample.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path_prefix + ".png")
    with open(path_prefix + ".json", "w") as f:
        json.dump({"boxes": sample.boxes, "labels": sample.labels, "seed": sample.seed}, f)
