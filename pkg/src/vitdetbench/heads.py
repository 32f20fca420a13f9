"""Detector head stacks and the toy dense detection loss.

The RPN, RoI box, and mask heads follow the upgraded layer recipes
(extra conv in RPN, conv+BN stacks in the RoI heads). RoIAlign is out of
scope, so the RoI heads are exercised on synthetic fixed-size features.
The dense head + loss give the end-to-end toy training signal: anchor-free
objectness per cell plus box offsets at positive cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .fpn import FeaturePyramid, PYRAMID_STRIDES
from .tensor import DimensionError, Tensor


class RPNHead(nn.Module):
    """Shared-across-levels RPN with two 3x3 convs before the sibling 1x1s."""

    def __init__(self, channels: int, rng: np.random.Generator, num_anchors: int = 3):
        self.conv1 = nn.Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, rng, padding=1)
        self.objectness = nn.Conv2d(channels, num_anchors, 1, rng)
        self.deltas = nn.Conv2d(channels, 4 * num_anchors, 1, rng)
        self.num_anchors = num_anchors

    def __call__(self, pyramid: FeaturePyramid):
        out = {}
        for s in PYRAMID_STRIDES:
            x = T.relu(self.conv2(T.relu(self.conv1(pyramid.levels[s]))))
            out[s] = (self.objectness(x), self.deltas(x))
        return out


class RoIBoxHead(nn.Module):
    """Four conv3x3+BN+ReLU, then one linear, then sibling class/box outputs."""

    def __init__(self, in_channels: int, rng: np.random.Generator, num_classes: int = 3,
                 conv_channels: int = 256, fc_dim: int = 1024, roi_size: int = 7):
        self.convs = [nn.Conv2d(in_channels if i == 0 else conv_channels,
                                conv_channels, 3, rng, padding=1, bias=False)
                      for i in range(4)]
        self.norms = [nn.BatchNorm2d(conv_channels) for _ in range(4)]
        self.fc = nn.Linear(conv_channels * roi_size * roi_size, fc_dim, rng)
        self.cls = nn.Linear(fc_dim, num_classes, rng)
        self.box = nn.Linear(fc_dim, 4 * num_classes, rng)
        self.roi_size = roi_size

    def __call__(self, rois: Tensor):
        r, c, hh, ww = rois.shape
        if (hh, ww) != (self.roi_size, self.roi_size):
            raise DimensionError(f"RoI features {hh}x{ww}, expected {self.roi_size}x{self.roi_size}")
        x = rois
        for conv, norm in zip(self.convs, self.norms):
            x = T.relu(norm(conv(x))) if r > 0 else conv(x)
        x = x.reshape(r, x.shape[1] * hh * ww)
        x = T.relu(self.fc(x))
        return self.cls(x), self.box(x)


class MaskHead(nn.Module):
    """Four conv3x3+BN+ReLU, a 2x deconv, then 1x1 to per-class mask logits."""

    def __init__(self, in_channels: int, rng: np.random.Generator, num_classes: int = 3,
                 conv_channels: int = 256):
        self.convs = [nn.Conv2d(in_channels if i == 0 else conv_channels,
                                conv_channels, 3, rng, padding=1, bias=False)
                      for i in range(4)]
        self.norms = [nn.BatchNorm2d(conv_channels) for _ in range(4)]
        self.deconv = nn.ConvTranspose2d(conv_channels, conv_channels, 2, rng, stride=2)
        self.predict = nn.Conv2d(conv_channels, num_classes, 1, rng)

    def __call__(self, rois: Tensor) -> Tensor:
        x = rois
        r = rois.shape[0]
        for conv, norm in zip(self.convs, self.norms):
            x = T.relu(norm(conv(x))) if r > 0 else conv(x)
        return self.predict(T.relu(self.deconv(x)))


class DenseHead(nn.Module):
    """Anchor-free toy head: shared 3x3 conv, sibling objectness/offset 1x1s."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = nn.Conv2d(channels, channels, 3, rng, padding=1)
        self.objectness = nn.Conv2d(channels, 1, 1, rng)
        self.offsets = nn.Conv2d(channels, 4, 1, rng)

    def __call__(self, pyramid: FeaturePyramid):
        out = {}
        for s in PYRAMID_STRIDES:
            x = T.relu(self.conv(pyramid.levels[s]))
            out[s] = (self.objectness(x), self.offsets(x))
        return out


@dataclass
class DenseTargets:
    """Per-level supervision grids for the toy dense loss.

    objectness: {stride: [N, 1, h, w]} of 0/1, offsets: {stride: [N, 4, h, w]}
    in units of cell widths, meaningful only where objectness == 1.
    """

    objectness: dict[int, np.ndarray]
    offsets: dict[int, np.ndarray]


# box-size boundaries, as fractions of the image side, assigning objects to levels
LEVEL_SIZE_BOUNDS = {4: (0.0, 1 / 8), 8: (1 / 8, 1 / 4), 16: (1 / 4, 1 / 2), 32: (1 / 2, np.inf)}


def build_dense_targets(boxes_batch, image_size: int, level_shapes: dict[int, tuple[int, int]],
                        batch_size: int | None = None) -> DenseTargets:
    """Center-cell positive assignment; level chosen by relative box size.

    ``level_shapes`` maps each nominal stride key to its actual (h, w) map
    extent; the effective cell size is image_size / h.
    """
    n = len(boxes_batch) if batch_size is None else batch_size
    obj = {s: np.zeros((n, 1, h, w), dtype=np.float32) for s, (h, w) in level_shapes.items()}
    off = {s: np.zeros((n, 4, h, w), dtype=np.float32) for s, (h, w) in level_shapes.items()}
    for i, boxes in enumerate(boxes_batch):
        for (x1, y1, x2, y2) in boxes:
            rel = max(x2 - x1, y2 - y1) / image_size
            key = next(s for s in sorted(level_shapes)
                       if LEVEL_SIZE_BOUNDS[s][0] <= rel < LEVEL_SIZE_BOUNDS[s][1])
            h, w = level_shapes[key]
            cell = image_size / h
            cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
            gx = min(int(cx // cell), w - 1)
            gy = min(int(cy // cell), h - 1)
            obj[key][i, 0, gy, gx] = 1.0
            cell_cx, cell_cy = (gx + 0.5) * cell, (gy + 0.5) * cell
            off[key][i, :, gy, gx] = [(cx - cell_cx) / cell, (cy - cell_cy) / cell,
                                      (x2 - x1) / cell, (y2 - y1) / cell]
    return DenseTargets(obj, off)


def level_shapes_of(preds: dict) -> dict[int, tuple[int, int]]:
    """Extract {stride key: (h, w)} from head predictions."""
    return {s: (obj.shape[2], obj.shape[3]) for s, (obj, _) in preds.items()}


def _bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Numerically stable binary cross-entropy on logits, summed."""
    t = Tensor(targets.astype(logits.data.dtype))
    # max(x,0) - x*t + log(1 + exp(-|x|))
    return (T.maximum(logits, 0.0) - logits * t
            + T.log(T.exp(-T.abs_(logits)) + 1.0)).sum()


def _smooth_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Smooth-L1 over masked entries, summed (beta = 1)."""
    m = Tensor(mask.astype(pred.data.dtype))
    d = (pred - Tensor(target.astype(pred.data.dtype))) * m
    a = T.abs_(d)
    quad = 0.5 * d * d
    lin = a - 0.5
    small = Tensor((np.abs(d.data) < 1.0).astype(pred.data.dtype))
    return (quad * small + lin * (1.0 - small)).sum()


def dense_detect_loss(preds: dict, targets: DenseTargets) -> Tensor:
    """BCE on objectness at all cells + smooth-L1 on offsets at positives.

    Both terms are averaged: BCE per cell, smooth-L1 per positive coordinate.
    """
    total_cells = 0
    total_pos = 0
    bce = None
    reg = None
    for s, (obj_logits, offsets) in preds.items():
        tgt_obj = targets.objectness[s]
        tgt_off = targets.offsets[s]
        if obj_logits.shape != tgt_obj.shape or offsets.shape != tgt_off.shape:
            raise DimensionError(f"level {s}: prediction/target geometry mismatch")
        term = _bce_with_logits(obj_logits, tgt_obj)
        bce = term if bce is None else bce + term
        total_cells += tgt_obj.size
        pos_mask = np.repeat(tgt_obj, 4, axis=1)
        term = _smooth_l1(offsets, tgt_off, pos_mask)
        reg = term if reg is None else reg + term
        total_pos += int(pos_mask.sum())
    loss = bce * (1.0 / total_cells)
    if total_pos > 0:
        loss = loss + reg * (1.0 / total_pos)
    return loss
