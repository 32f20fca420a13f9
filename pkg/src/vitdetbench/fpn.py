"""Resolution-modifying adapter modules and the BN-augmented FPN.

The four adapter stacks convert the single-scale ViT tap outputs into
stride-{4, 8, 16, 32} maps (4x up, 2x up, identity, 2x down), preserving the
embedding/channel dimension. The FPN then merges them top-down with every
convolution followed by batch normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .backbone import PatchGrid
from .tensor import DimensionError, InvalidInputError, Tensor

PYRAMID_STRIDES = (4, 8, 16, 32)


@dataclass
class FeaturePyramid:
    """Ordered stride-{4,8,16,32} maps sharing one channel width."""

    levels: dict[int, Tensor]
    channels: int

    def __post_init__(self):
        if tuple(sorted(self.levels)) != PYRAMID_STRIDES:
            raise DimensionError(f"pyramid strides {sorted(self.levels)} != {PYRAMID_STRIDES}")
        for s, x in self.levels.items():
            if x.shape[1] != self.channels:
                raise DimensionError(f"level {s} has {x.shape[1]} channels, expected {self.channels}")

    def ordered(self) -> list[Tensor]:
        return [self.levels[s] for s in PYRAMID_STRIDES]


class ScaleModule(nn.Module):
    """One of the four tap adapters, selected by tap index 0..3."""

    def __init__(self, tap_index: int, channels: int, rng: np.random.Generator,
                 gn_groups: int = 8):
        if tap_index not in (0, 1, 2, 3):
            raise InvalidInputError(f"invalid tap index: {tap_index}")
        self.tap_index = tap_index
        if tap_index == 0:
            # 4x up: deconv, group norm, GeLU, deconv
            self.up1 = nn.ConvTranspose2d(channels, channels, 2, rng, stride=2)
            self.norm = nn.GroupNorm(min(gn_groups, channels), channels)
            self.up2 = nn.ConvTranspose2d(channels, channels, 2, rng, stride=2)
        elif tap_index == 1:
            self.up1 = nn.ConvTranspose2d(channels, channels, 2, rng, stride=2)

    def __call__(self, x: Tensor) -> Tensor:
        if self.tap_index == 0:
            return self.up2(T.gelu(self.norm(self.up1(x))))
        if self.tap_index == 1:
            return self.up1(x)
        if self.tap_index == 2:
            return x
        return T.maxpool2d(x, 2)


class FPN(nn.Module):
    """Top-down FPN: 1x1 laterals, nearest 2x upsample-add, 3x3 output convs.

    Every convolution is followed by batch normalization (single-device).
    """

    def __init__(self, in_channels: int, rng: np.random.Generator, out_channels: int = 256):
        self.out_channels = out_channels
        self.laterals = [nn.Conv2d(in_channels, out_channels, 1, rng, bias=False)
                         for _ in PYRAMID_STRIDES]
        self.lateral_norms = [nn.BatchNorm2d(out_channels) for _ in PYRAMID_STRIDES]
        self.outputs = [nn.Conv2d(out_channels, out_channels, 3, rng, padding=1, bias=False)
                        for _ in PYRAMID_STRIDES]
        self.output_norms = [nn.BatchNorm2d(out_channels) for _ in PYRAMID_STRIDES]

    def __call__(self, maps: dict[int, Tensor]) -> FeaturePyramid:
        if tuple(sorted(maps)) != PYRAMID_STRIDES:
            raise DimensionError(f"adapter maps at strides {sorted(maps)}, expected {PYRAMID_STRIDES}")
        laterals = {}
        for i, s in enumerate(PYRAMID_STRIDES):
            laterals[s] = self.lateral_norms[i](self.laterals[i](maps[s]))
        merged = {32: laterals[32]}
        for s in (16, 8, 4):
            merged[s] = laterals[s] + T.nearest_upsample2x(merged[s * 2])
        levels = {}
        for i, s in enumerate(PYRAMID_STRIDES):
            levels[s] = self.output_norms[i](self.outputs[i](merged[s]))
        return FeaturePyramid(levels, self.out_channels)


class FPNAdapter(nn.Module):
    """Four scale modules + FPN, from backbone taps to the feature pyramid."""

    def __init__(self, channels: int, rng: np.random.Generator, fpn_channels: int = 256):
        self.scales = [ScaleModule(i, channels, rng) for i in range(4)]
        self.fpn = FPN(channels, rng, fpn_channels)

    def adapt(self, taps: dict[int, Tensor]) -> dict[int, Tensor]:
        if sorted(taps) != [0, 1, 2, 3]:
            raise InvalidInputError(f"expected taps 0..3, got {sorted(taps)}")
        return {PYRAMID_STRIDES[i]: self.scales[i](taps[i]) for i in range(4)}

    def __call__(self, taps: dict[int, Tensor]) -> FeaturePyramid:
        return self.fpn(self.adapt(taps))


def single_scale_forward(final: PatchGrid) -> Tensor:
    """Single-scale ablation path: the stride-16 final map, no adapter/FPN."""
    return final.as_map()
