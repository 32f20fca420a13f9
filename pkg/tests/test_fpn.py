"""Adapter + FPN tests: stride geometry, channel preservation, param counts."""

import numpy as np
import pytest

from vitdetbench.backbone import BackboneConfig, PatchGrid, ViTBackbone
from vitdetbench.fpn import (
    FPN,
    FPNAdapter,
    FeaturePyramid,
    PYRAMID_STRIDES,
    ScaleModule,
    single_scale_forward,
)
from vitdetbench.tensor import DimensionError, InvalidInputError, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def feature(rng, n, c, h, w):
    return Tensor(rng.standard_normal((n, c, h, w)).astype(np.float32))


class TestScaleModules:
    @pytest.mark.parametrize("tap,factor", [(0, 4), (1, 2), (2, 1)])
    def test_upsample_factors(self, rng, tap, factor):
        mod = ScaleModule(tap, 16, rng)
        out = mod(feature(rng, 2, 16, 14, 14))
        assert out.shape == (2, 16, 14 * factor, 14 * factor)

    def test_downsample(self, rng):
        out = ScaleModule(3, 16, rng)(feature(rng, 2, 16, 14, 14))
        assert out.shape == (2, 16, 7, 7)

    def test_identity_is_exact(self, rng):
        x = feature(rng, 1, 8, 6, 6)
        assert ScaleModule(2, 8, rng)(x) is x

    def test_channels_preserved(self, rng):
        for tap in range(4):
            out = ScaleModule(tap, 24, rng)(feature(rng, 1, 24, 8, 8))
            assert out.shape[1] == 24

    def test_invalid_tap(self, rng):
        with pytest.raises(InvalidInputError):
            ScaleModule(4, 16, rng)

    def test_strides_from_stride16_taps(self, rng):
        # a stride-16 tap at 1024 input is 64x64; the four adapters land on
        # exactly stride {4, 8, 16, 32} geometry
        x = feature(rng, 1, 8, 64, 64)
        extents = [ScaleModule(i, 8, rng)(x).shape[-1] for i in range(4)]
        assert [1024 // e for e in extents] == list(PYRAMID_STRIDES)


class TestFPN:
    def make_maps(self, rng, c, base=32):
        return {s: feature(rng, 2, c, base * 4 // s, base * 4 // s).data for s in PYRAMID_STRIDES}

    def test_output_geometry(self, rng):
        fpn = FPN(16, rng, out_channels=32)
        maps = {s: Tensor(v) for s, v in self.make_maps(rng, 16).items()}
        pyr = fpn(maps)
        assert pyr.channels == 32
        for s in PYRAMID_STRIDES:
            assert pyr.levels[s].shape == (2, 32, 128 // s, 128 // s)

    def test_missing_level_raises(self, rng):
        fpn = FPN(16, rng, out_channels=32)
        maps = {s: Tensor(v) for s, v in self.make_maps(rng, 16).items() if s != 8}
        with pytest.raises(DimensionError):
            fpn(maps)

    def test_param_count_closed_form(self, rng):
        """4 laterals (C*F, no bias) + 4 output 3x3 (9F^2, no bias) + 8 BNs (2F)."""
        c, f = 16, 32
        fpn = FPN(c, rng, out_channels=f)
        expected = 4 * (c * f) + 4 * (9 * f * f) + 8 * (2 * f)
        assert fpn.num_params() == expected

    def test_pyramid_validates_strides(self):
        with pytest.raises(DimensionError):
            FeaturePyramid({4: Tensor(np.zeros((1, 8, 4, 4), np.float32))}, 8)

    def test_pyramid_validates_channels(self):
        levels = {s: Tensor(np.zeros((1, 8 if s != 16 else 4, 4, 4), np.float32))
                  for s in PYRAMID_STRIDES}
        with pytest.raises(DimensionError):
            FeaturePyramid(levels, 8)


class TestFPNAdapter:
    def test_end_to_end_from_backbone(self, rng):
        cfg = BackboneConfig(depth=4, embed_dim=32, num_heads=4, patch_size=8,
                             img_size=64, window_size=4)
        backbone = ViTBackbone(cfg, seed=0)
        adapter = FPNAdapter(32, rng, fpn_channels=32)
        x = Tensor(rng.standard_normal((1, 3, 64, 64)).astype(np.float32))
        _, taps = backbone(x)
        pyr = adapter(taps)
        # patch grid is 8x8 (stride 8); adapter multiplies to {2,4,8,16} px cells
        assert [pyr.levels[s].shape[-1] for s in PYRAMID_STRIDES] == [32, 16, 8, 4]

    def test_adapt_requires_all_taps(self, rng):
        adapter = FPNAdapter(8, rng, fpn_channels=8)
        with pytest.raises(InvalidInputError):
            adapter.adapt({0: feature(rng, 1, 8, 4, 4)})

    def test_gradient_reaches_every_scale_module(self, rng):
        adapter = FPNAdapter(8, rng, fpn_channels=8)
        taps = {i: feature(rng, 1, 8, 4, 4) for i in range(4)}
        pyr = adapter(taps)
        sum(level.sum() for level in pyr.ordered()).backward()
        for name, p in adapter.named_parameters():
            assert p.grad is not None, name


def test_single_scale_forward_is_plain_map(rng):
    tokens = Tensor(rng.standard_normal((2, 4, 4, 8)).astype(np.float32))
    out = single_scale_forward(PatchGrid(tokens, 4, 4))
    assert out.shape == (2, 8, 4, 4)
    np.testing.assert_array_equal(out.data, tokens.data.transpose(0, 3, 1, 2))
