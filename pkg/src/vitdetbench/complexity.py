"""Analytic parameter/flop/activation accounting and empirical time/memory
benchmarking across attention strategies.

Conventions, stated in every report: 1 multiply-accumulate = 2 flops;
softmax/normalization cost 5 flops per element; memory is counted in saved
elements (dtype-agnostic), where "saved" means retained for the backward
pass. Wall time is only ever measured, never estimated.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, ViTBackbone
from .nn import Module
from .tensor import InvalidInputError, Tensor

FLOPS_PER_MAC = 2
NORM_SOFTMAX_FLOPS_PER_ELEMENT = 5

STRATEGIES = ("all_windowed", "hybrid_4_global", "all_global", "all_global_checkpointed")


def attention_complexity(h: int, w: int, r: int, channels: int, heads: int,
                         global_attention: bool):
    """(flops, logit_memory_elements) of the attention matmuls and logits.

    Global attention over an h x w grid costs O(h^2 w^2); windowed attention
    over r x r windows (grid zero-padded up to multiples of r) costs
    O(r^2 hw). Projections are not included here; they are identical across
    strategies and counted separately.
    """
    if h < 1 or w < 1 or r < 1:
        raise InvalidInputError("extents must be positive")
    if global_attention:
        t = h * w
        logit_mem = t * t * heads
        flops = FLOPS_PER_MAC * 2 * t * t * channels
    else:
        hp = r * math.ceil(h / r)
        wp = r * math.ceil(w / r)
        nw = (hp // r) * (wp // r)
        logit_mem = r ** 4 * nw * heads
        flops = FLOPS_PER_MAC * 2 * r ** 4 * nw * channels
    return flops, logit_mem


def count_params(module: Module):
    """Exact learnable-scalar count, itemized by top-level submodule."""
    itemized: dict[str, int] = {}
    for name, p in module.named_parameters():
        key = name.split(".")[0]
        itemized[key] = itemized.get(key, 0) + p.size
    return sum(itemized.values()), itemized


def _block_flops(cfg: BackboneConfig, h: int, w: int, is_global: bool) -> int:
    """Analytic flops of one transformer block on an h x w token grid."""
    c = cfg.embed_dim
    r = cfg.window_size
    if is_global:
        t = h * w
    else:
        t = (r * math.ceil(h / r)) * (r * math.ceil(w / r))  # padded token count
    hidden = int(c * cfg.mlp_ratio)
    flops = 0
    flops += FLOPS_PER_MAC * t * c * 3 * c  # qkv projection
    attn_flops, _ = attention_complexity(h, w, r, c, cfg.num_heads, is_global)
    flops += attn_flops
    flops += FLOPS_PER_MAC * t * c * c  # output projection
    flops += FLOPS_PER_MAC * 2 * t * c * hidden  # mlp
    # norms (2x) and softmax, at the documented per-element constant
    _, logit_mem = attention_complexity(h, w, r, c, cfg.num_heads, is_global)
    flops += NORM_SOFTMAX_FLOPS_PER_ELEMENT * (2 * t * c + logit_mem)
    return flops


def count_flops(cfg: BackboneConfig, input_hw: tuple[int, int], batch: int = 1) -> int:
    """Analytic backbone flops for one forward pass; linear in batch size."""
    hh, ww = input_hw
    p = cfg.patch_size
    h, w = hh // p, ww // p
    flops = FLOPS_PER_MAC * (h * w) * cfg.embed_dim * cfg.in_channels * p * p  # patch embed
    for i in range(cfg.depth):
        flops += _block_flops(cfg, h, w, i in cfg.global_block_indices)
    return batch * flops


def conv_flops(out_ch: int, in_ch: int, kh: int, kw: int, out_h: int, out_w: int) -> int:
    return FLOPS_PER_MAC * out_ch * in_ch * kh * kw * out_h * out_w


# -- analytic saved-activation model (validated against the runtime counter) --

def attention_saved_elements(batch: int, tokens: int, channels: int, heads: int) -> int:
    """Elements the engine saves for backward in one attention call.

    Mirrors the op sequence: qkv matmul (x + weight), the q-scale constant,
    the logit matmul (q, k), softmax output, the value matmul (weights, v),
    and the output projection (input + weight).
    """
    btc = batch * tokens * channels
    logits = batch * heads * tokens * tokens
    return 5 * btc + 2 * logits + 4 * channels * channels + 1


def mlp_saved_elements(batch: int, tokens: int, channels: int, hidden: int) -> int:
    """Saved elements of one MLP call: fc1 (x + w), gelu input, fc2 (x + w)."""
    return batch * tokens * channels + 2 * batch * tokens * hidden + 2 * channels * hidden


# --------------------------------------------------------------------------
# empirical benchmarking
# --------------------------------------------------------------------------

@dataclass
class ComplexityReport:
    strategy: str
    params: int = 0
    flops: int = 0
    activations: int = 0  # total saved elements over one training forward
    peak_activation_elements: int = 0
    wall_time_mean: float | None = None  # train step, seconds
    wall_time_std: float | None = None
    inference_time_mean: float | None = None
    oom: bool = False
    notes: str = ""
    conventions: str = ("1 MAC = 2 flops; softmax/norm = 5 flops/element; "
                        "memory in saved-for-backward elements")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def strategy_config(cfg: BackboneConfig, strategy: str):
    """Derive (config, checkpoint_flag) for one attention strategy."""
    if strategy not in STRATEGIES:
        raise InvalidInputError(f"unknown strategy: {strategy}")
    kwargs = dict(depth=cfg.depth, embed_dim=cfg.embed_dim, num_heads=cfg.num_heads,
                  mlp_ratio=cfg.mlp_ratio, patch_size=cfg.patch_size,
                  window_size=cfg.window_size, img_size=cfg.img_size,
                  use_abs_pos=cfg.use_abs_pos, use_rel_pos=cfg.use_rel_pos,
                  layer_scale_init=cfg.layer_scale_init,
                  drop_path_rate=cfg.drop_path_rate, in_channels=cfg.in_channels)
    if strategy == "all_windowed":
        kwargs["global_block_indices"] = ()
    elif strategy == "hybrid_4_global":
        kwargs["global_block_indices"] = None
    else:
        kwargs["global_block_indices"] = tuple(range(cfg.depth))
    return BackboneConfig(**kwargs), strategy == "all_global_checkpointed"


def bench(cfg: BackboneConfig, strategy: str, input_hw: tuple[int, int] | None = None,
          trials: int = 3, seed: int = 0, warmup: int = 2, batch: int = 1) -> ComplexityReport:
    """Measure one strategy: train-step time, inference time, saved activations.

    Out-of-memory during construction or execution is a reported outcome,
    not an exception.
    """
    input_hw = input_hw or (cfg.img_size, cfg.img_size)
    scfg, use_checkpoint = strategy_config(cfg, strategy)
    report = ComplexityReport(strategy=strategy)
    try:
        model = ViTBackbone(scfg, seed=seed)
        model.checkpoint_blocks = use_checkpoint
    except MemoryError:
        report.oom = True
        report.notes = "out of memory constructing the model"
        return report
    report.params = model.num_params()
    report.flops = count_flops(scfg, input_hw, batch)

    rng = np.random.default_rng(seed)
    image = Tensor(rng.standard_normal((batch, scfg.in_channels, *input_hw)).astype(np.float32))

    def train_step():
        grid, _ = model(image, "train", rng)
        loss = grid.tokens.sum()
        model.zero_grad()
        loss.backward()

    try:
        with T.track_activations() as c:
            train_step()
        report.activations = c.total
        report.peak_activation_elements = c.peak

        times = []
        for i in range(warmup + trials):
            t0 = time.perf_counter()
            train_step()
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt)
        report.wall_time_mean = float(np.mean(times))
        report.wall_time_std = float(np.std(times, ddof=1)) if trials > 1 else None

        inf_times = []
        for i in range(1 + trials):
            t0 = time.perf_counter()
            with T.no_grad():
                model(image, "eval")
            if i >= 1:
                inf_times.append(time.perf_counter() - t0)
        report.inference_time_mean = float(np.mean(inf_times))
    except MemoryError:
        report.oom = True
        report.notes = "out of memory during execution"
    return report


def quality_proxy(cfg: BackboneConfig, strategy: str) -> float:
    """Share of blocks with cross-window (global) information flow."""
    scfg, _ = strategy_config(cfg, strategy)
    return len(scfg.global_block_indices) / scfg.depth


def compare_strategies(cfg: BackboneConfig, input_hw: tuple[int, int] | None = None,
                       trials: int = 3, seed: int = 0) -> list[ComplexityReport]:
    """Bench all four strategies; rows mirror the memory/time reduction table."""
    reports = []
    for strategy in STRATEGIES:
        rep = bench(cfg, strategy, input_hw, trials=trials, seed=seed)
        rep.notes = (rep.notes + f" quality_proxy={quality_proxy(cfg, strategy):.2f}").strip()
        reports.append(rep)
    return reports


def format_table(reports: list[ComplexityReport]) -> str:
    """Aligned-text table of strategy comparisons."""
    header = ["strategy", "params", "flops", "peak acts", "train step (s)", "inference (s)", "status"]
    rows = [header]
    for r in reports:
        rows.append([
            r.strategy, str(r.params), str(r.flops), str(r.peak_activation_elements),
            "-" if r.wall_time_mean is None else f"{r.wall_time_mean:.4f}",
            "-" if r.inference_time_mean is None else f"{r.inference_time_mean:.4f}",
            "OOM" if r.oom else "ok",
        ])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(0, f"# {reports[0].conventions}" if reports else "#")
    return "\n".join(lines)
