"""Checkpoint serialization, positional resizing, and transfer-rule tests."""

import numpy as np
import pytest

from vitdetbench.backbone import BackboneConfig, ViTBackbone
from vitdetbench.checkpoint import (
    Checkpoint,
    FormatError,
    TransferError,
    apply_transfer_rules,
    build_from_checkpoint,
    checkpoint_metadata,
    load,
    random_init,
    resize_abs_pos,
    resize_rel_bias,
    save,
)
from vitdetbench.tensor import Tensor


def tiny_cfg(**over):
    kwargs = dict(depth=4, embed_dim=32, num_heads=4, patch_size=8, img_size=64,
                  window_size=4)
    kwargs.update(over)
    return BackboneConfig(**kwargs)


@pytest.fixture
def rng():
    return np.random.default_rng(21)


class TestSerialization:
    def test_roundtrip_bit_exact(self, rng, tmp_path):
        params = {
            "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
            "b.bias": rng.standard_normal(7).astype(np.float64),
            "c": np.float32(rng.standard_normal()) * np.ones((), np.float32),
        }
        p = tmp_path / "model.ckpt"
        save(params, p, metadata={"provenance": "test"})
        back = load(p)
        assert set(back.params) == set(params)
        for k in params:
            assert back.params[k].dtype == params[k].dtype
            np.testing.assert_array_equal(back.params[k], params[k])
        assert back.metadata["provenance"] == "test"

    def test_save_load_save_identical_bytes(self, rng, tmp_path):
        params = {"w.weight": rng.standard_normal((5, 5)).astype(np.float32),
                  "w.bias": rng.standard_normal(5).astype(np.float32)}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save(params, p1)
        save(load(p1).params, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_tensor_values_accepted(self, rng, tmp_path):
        t = Tensor(rng.standard_normal(4).astype(np.float32))
        p = tmp_path / "t.ckpt"
        save({"x.bias": t}, p)
        np.testing.assert_array_equal(load(p).params["x.bias"], t.data)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load(p)

    def test_truncation_names_entry(self, rng, tmp_path):
        params = {"first.weight": rng.standard_normal(3).astype(np.float32),
                  "second.weight": rng.standard_normal(3).astype(np.float32)}
        p = tmp_path / "full.ckpt"
        save(params, p)
        blob = p.read_bytes()
        cut = tmp_path / "cut.ckpt"
        cut.write_bytes(blob[:-6])  # cut into the last entry's data
        with pytest.raises(FormatError, match="second.weight"):
            load(cut)

    def test_unsupported_dtype_rejected(self, tmp_path):
        with pytest.raises(FormatError, match="dtype"):
            save({"x": np.zeros(3, np.int64)}, tmp_path / "x.ckpt")

    def test_missing_sidecar_gives_empty_metadata(self, rng, tmp_path):
        p = tmp_path / "bare.ckpt"
        save({"x.bias": rng.standard_normal(2).astype(np.float32)}, p)
        (tmp_path / "bare.ckpt.meta.json").unlink()
        assert load(p).metadata == {}


class TestResizing:
    def test_abs_identity_bitwise(self, rng):
        embed = rng.standard_normal((16, 8)).astype(np.float32)
        out = resize_abs_pos(embed, (4, 4))
        np.testing.assert_array_equal(out, embed)

    def test_abs_14_to_64(self, rng):
        embed = rng.standard_normal((14 * 14, 8)).astype(np.float32)
        out = resize_abs_pos(embed, (64, 64))
        assert out.shape == (64 * 64, 8)
        # corners are preserved under corner-aligned interpolation
        np.testing.assert_allclose(out[0], embed[0], atol=1e-6)
        np.testing.assert_allclose(out[-1], embed[-1], atol=1e-6)

    def test_abs_odd_to_odd_preserves_center(self, rng):
        embed = rng.standard_normal((7 * 7, 4)).astype(np.float32)
        out = resize_abs_pos(embed, (13, 13))
        np.testing.assert_allclose(out.reshape(13, 13, 4)[6, 6],
                                   embed.reshape(7, 7, 4)[3, 3], atol=1e-6)

    def test_abs_non_square_needs_src(self, rng):
        embed = rng.standard_normal((12, 4)).astype(np.float32)
        with pytest.raises(TransferError):
            resize_abs_pos(embed, (4, 4))
        out = resize_abs_pos(embed, (4, 4), src=(3, 4))
        assert out.shape == (16, 4)

    def test_rel_identity_bitwise(self, rng):
        table = rng.standard_normal((2, 7, 7)).astype(np.float32)
        np.testing.assert_array_equal(resize_rel_bias(table, (4, 4)), table)

    def test_rel_2_to_3_center_preserved(self, rng):
        """(2,2) table is 3x3; (3,3) target is 5x5; the zero-offset center
        entry must stay put under corner-aligned resizing."""
        table = rng.standard_normal((1, 3, 3)).astype(np.float32)
        out = resize_rel_bias(table, (3, 3))
        assert out.shape == (1, 5, 5)
        np.testing.assert_allclose(out[0, 2, 2], table[0, 1, 1], atol=1e-6)
        # interior points interpolate between neighbors (oracle: midpoint avg)
        np.testing.assert_allclose(out[0, 1, 1],
                                   table[0, :2, :2].mean(), atol=1e-6)


class TestTransferRules:
    def make_ckpt(self, cfg, seed=0, provenance="pretext"):
        params = random_init(cfg, seed)
        # perturb so "pretrained" is distinguishable from fresh random init
        for k in params:
            params[k] = params[k] + 1.0
        return Checkpoint(params, checkpoint_metadata(cfg, provenance))

    def test_abs_only_checkpoint(self):
        src = tiny_cfg(use_abs_pos=True, use_rel_pos=False)
        dst = tiny_cfg(use_abs_pos=True, use_rel_pos=True)
        params, report = apply_transfer_rules(self.make_ckpt(src), dst, seed=1)
        assert report["abs_pos"] == "pretrained"
        assert report["rel_table_windowed"] == "zero"
        assert report["rel_table_global"] == "zero"
        np.testing.assert_array_equal(params["rel_table_windowed"], 0.0)
        assert report["patch_embed.weight"] == "pretrained"

    def test_rel_only_checkpoint(self):
        src = tiny_cfg(use_abs_pos=False, use_rel_pos=True)
        dst = tiny_cfg(use_abs_pos=True, use_rel_pos=True)
        ckpt = self.make_ckpt(src)
        params, report = apply_transfer_rules(ckpt, dst, seed=1)
        assert report["rel_table_windowed"] == "pretrained"
        assert report["abs_pos"] == "random"
        fresh = random_init(dst, 1)
        np.testing.assert_array_equal(params["abs_pos"], fresh["abs_pos"])

    def test_abs_resized_on_grid_mismatch(self):
        src = tiny_cfg(img_size=32, use_rel_pos=False)  # 4x4 grid
        dst = tiny_cfg(img_size=64, use_rel_pos=False)  # 8x8 grid
        params, report = apply_transfer_rules(self.make_ckpt(src), dst)
        assert report["abs_pos"] == "pretrained-resized"
        assert params["abs_pos"].shape == (1, 8, 8, 32)

    def test_rel_resized_on_window_mismatch(self):
        src = tiny_cfg(window_size=4, use_abs_pos=False)
        dst = tiny_cfg(window_size=8, use_abs_pos=False)
        # window_size is not a compatibility key; tables resize instead
        params, report = apply_transfer_rules(self.make_ckpt(src), dst)
        assert report["rel_table_windowed"] == "pretrained-resized"
        assert params["rel_table_windowed"].shape == (4, 15, 15)

    def test_class_token_row_dropped(self):
        dst = tiny_cfg(use_rel_pos=False)
        flat = np.arange((64 + 1) * 32, dtype=np.float32).reshape(65, 32)
        ckpt = Checkpoint({"abs_pos": flat},
                          {"has_abs_pos": True, "has_rel_pos": False,
                           "pretrain_grid": [8, 8]})
        params, report = apply_transfer_rules(ckpt, dst)
        assert report["abs_pos"] == "pretrained"
        np.testing.assert_array_equal(params["abs_pos"].reshape(64, 32), flat[1:])

    def test_hyperparameter_mismatch_names_field(self):
        src = tiny_cfg(embed_dim=32)
        dst = BackboneConfig(depth=4, embed_dim=64, num_heads=4, patch_size=8,
                             img_size=64, window_size=4)
        with pytest.raises(TransferError, match="embed_dim"):
            apply_transfer_rules(self.make_ckpt(src), dst)

    def test_layer_scale_mismatch_raises(self):
        src = tiny_cfg(layer_scale_init=1e-4)
        dst = tiny_cfg()
        with pytest.raises(TransferError, match="layer scale"):
            apply_transfer_rules(self.make_ckpt(src), dst)

    def test_layer_scale_transfers_when_both_present(self):
        src = tiny_cfg(layer_scale_init=1e-4)
        dst = tiny_cfg(layer_scale_init=1e-4)
        _, report = apply_transfer_rules(self.make_ckpt(src), dst)
        assert report["blocks.0.gamma1"] == "pretrained"

    def test_report_covers_every_parameter(self):
        src = tiny_cfg()
        dst = tiny_cfg()
        params, report = apply_transfer_rules(self.make_ckpt(src), dst)
        assert set(report) == set(params)
        assert set(report.values()) <= {"pretrained", "pretrained-resized", "zero", "random"}

    def test_build_from_checkpoint_loads(self):
        cfg = tiny_cfg()
        ckpt = self.make_ckpt(cfg)
        model = build_from_checkpoint(ckpt, cfg, seed=2)
        got = dict(model.named_parameters())
        np.testing.assert_array_equal(got["patch_embed.weight"].data,
                                      ckpt.params["patch_embed.weight"])


def test_random_init_conventions():
    cfg = tiny_cfg()
    params = random_init(cfg, seed=0)
    # norm scales are ones, biases zero, rel tables zero
    np.testing.assert_array_equal(params["blocks.0.norm1.weight"], 1.0)
    np.testing.assert_array_equal(params["blocks.0.norm1.bias"], 0.0)
    np.testing.assert_array_equal(params["rel_table_windowed"], 0.0)
    # truncated normal: bounded by 2 std of 0.02
    w = params["blocks.0.attn.qkv.weight"]
    assert np.abs(w).max() <= 0.04 + 1e-6
    assert 0.01 < w.std() < 0.03
