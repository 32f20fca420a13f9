"""Training loops: the fine-tune formula (LSJ + AdamW + warmup/cosine +
drop path) and the masked-reconstruction pretext task, with convergence
recording.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from . import tensor as T
from .backbone import BackboneConfig, PatchGrid, ViTBackbone
from .checkpoint import Checkpoint, apply_transfer_rules, checkpoint_metadata
from .data import Sample, lsj, mask_patches
from .fpn import FPNAdapter
from .heads import DenseHead, build_dense_targets, dense_detect_loss, level_shapes_of
from .optim import AdamW, lr_at, warmup_steps_for
from .tensor import InvalidInputError, Tensor


@dataclass
class TrainFormula:
    """The tunable training recipe: lr, wd, dp plus fixed scaffolding."""

    lr: float = 1.6e-4
    wd: float = 0.1
    dp: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 20
    warmup_epochs: float = 0.25
    batch_size: int = 8
    resolution: int = 1024
    scale_range: tuple[float, float] = (0.1, 2.0)

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidInputError("lr must be positive")
        if self.wd < 0:
            raise InvalidInputError("wd must be non-negative")
        if not 0.0 <= self.dp < 1.0:
            raise InvalidInputError("dp must lie in [0, 1)")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise InvalidInputError("warmup must be shorter than the schedule")


@dataclass
class Curve:
    """Per-epoch training records; epoch 0 is the pre-training evaluation."""

    init_mode: str = "random"
    records: list[dict] = field(default_factory=list)

    def add(self, epoch: int, loss: float, metric: float, lr: float, seconds: float):
        if self.records and epoch <= self.records[-1]["epoch"]:
            raise InvalidInputError("curve epochs must be strictly increasing")
        self.records.append({"epoch": epoch, "loss": loss, "metric": metric,
                             "lr": lr, "seconds": seconds})

    def final_loss(self) -> float:
        return self.records[-1]["loss"]

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["epoch", "loss", "metric", "lr", "seconds"])
            w.writeheader()
            w.writerows(self.records)

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump({"init_mode": self.init_mode, "records": self.records}, f, indent=2)

    @staticmethod
    def read_json(path) -> "Curve":
        with open(path) as f:
            d = json.load(f)
        return Curve(d.get("init_mode", "unknown"), d["records"])


class DenseDetector(nn.Module):
    """Backbone + adapter/FPN + dense head: the end-to-end toy detector."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0, fpn_channels: int | None = None):
        rng = np.random.default_rng((seed, 1))
        self.backbone = ViTBackbone(cfg, seed=seed)
        width = fpn_channels or min(cfg.embed_dim, 256)
        self.adapter = FPNAdapter(cfg.embed_dim, rng, fpn_channels=width)
        self.head = DenseHead(width, rng)
        self.cfg = cfg

    def __call__(self, images: Tensor, mode: str = "eval", rng=None):
        _, taps = self.backbone(images, mode, rng)
        return self.head(self.adapter(taps))

    def train(self, mode: bool = True):
        super().train(mode)
        return self


def detection_loss(model: DenseDetector, batch: list[Sample], mode: str,
                   rng=None) -> Tensor:
    images = Tensor(np.stack([s.image for s in batch]))
    preds = model(images, mode, rng)
    targets = build_dense_targets([s.boxes for s in batch], batch[0].image.shape[-1],
                                  level_shapes_of(preds))
    return dense_detect_loss(preds, targets)


def evaluate_detection(model: DenseDetector, samples: list[Sample]) -> float:
    """Eval-mode detection loss over a fixed sample list (the toy metric)."""
    model.train(False)
    with T.no_grad():
        loss = detection_loss(model, samples, "eval")
    return float(loss.item())


def _batches(indices, batch_size):
    for i in range(0, len(indices), batch_size):
        yield indices[i:i + batch_size]


def finetune(cfg: BackboneConfig, formula: TrainFormula, init, dataset,
             eval_fn=None, seed: int = 0, eval_samples=None,
             augment: bool = True) -> Curve:
    """Train the toy detector with the standard formula; returns the Curve.

    ``init`` is "random" or a Checkpoint (backbone transfer rules applied).
    Deterministic given the seed, modulo floating-point reduction order.
    """
    cfg.drop_path_rate = formula.dp
    init_mode = "random" if isinstance(init, str) else init.metadata.get("provenance", "checkpoint")
    model = DenseDetector(cfg, seed=seed)
    if not isinstance(init, str):
        params, _ = apply_transfer_rules(init, cfg, seed=seed)
        model.backbone.load_param_dict(params)

    rng = np.random.default_rng((seed, 0xF17E))
    samples = [dataset[i] for i in range(len(dataset))]
    if eval_samples is None:
        eval_samples = samples[: min(16, len(samples))]
    if eval_fn is None:
        eval_fn = lambda m: evaluate_detection(m, eval_samples)

    steps_per_epoch = max(1, -(-len(samples) // formula.batch_size))
    total_steps = max(formula.epochs * steps_per_epoch, 1)
    warmup = warmup_steps_for(formula.warmup_epochs, steps_per_epoch)

    opt = AdamW(dict(model.named_parameters()), lr=formula.lr,
                weight_decay=formula.wd, betas=formula.betas)
    curve = Curve(init_mode=init_mode)
    curve.add(0, float("nan"), eval_fn(model), formula.lr, 0.0)

    step = 0
    for epoch in range(1, formula.epochs + 1):
        t0 = time.perf_counter()
        model.train(True)
        order = rng.permutation(len(samples))
        losses = []
        for batch_idx in _batches(order, formula.batch_size):
            batch = [samples[i] for i in batch_idx]
            if augment:
                batch = [lsj(s, rng, formula.resolution, formula.scale_range) for s in batch]
            lr_t = lr_at(step, total_steps, warmup, formula.lr)
            loss = detection_loss(model, batch, "train", rng)
            opt.zero_grad()
            loss.backward()
            opt.step(lr_t)
            losses.append(loss.item())
            step += 1
        curve.add(epoch, float(np.mean(losses)), eval_fn(model),
                  lr_at(min(step, total_steps), total_steps, warmup, formula.lr),
                  time.perf_counter() - t0)
    return curve


class MaskedReconstructor(nn.Module):
    """Backbone encoder with a learned mask token and a linear pixel decoder.

    Masked patch embeddings are replaced by the mask token before position
    embeddings are added; the decoder regresses each masked patch's
    per-patch-normalized pixels.
    """

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        rng = np.random.default_rng((seed, 2))
        self.backbone = ViTBackbone(cfg, seed=seed)
        c = cfg.embed_dim
        p = cfg.patch_size
        self.mask_token = Tensor(nn.trunc_normal(rng, (1, 1, 1, c)), requires_grad=True)
        self.decoder = nn.Linear(c, p * p * cfg.in_channels, rng)
        self.cfg = cfg

    def reconstruction_loss(self, images: np.ndarray, mask_ratio: float,
                            rng: np.random.Generator) -> Tensor:
        bb = self.backbone
        cfg = self.cfg
        n = images.shape[0]
        vis_masks, targets, masked_lists = [], [], []
        for i in range(n):
            visible, masked, tgt = mask_patches(images[i], mask_ratio, rng, cfg.patch_size)
            g = cfg.grid_size
            vm = np.ones(g * g, dtype=np.float32)
            vm[masked] = 0.0
            vis_masks.append(vm.reshape(g, g, 1))
            targets.append(tgt)
            masked_lists.append(masked)
        vis = Tensor(np.stack(vis_masks))  # [N, g, g, 1]

        tokens = bb.patch_embed(Tensor(images)).transpose(0, 2, 3, 1)
        tokens = tokens * vis + self.mask_token * (1.0 - vis)
        if bb.abs_pos is not None:
            tokens = tokens + bb.abs_pos
        g = cfg.grid_size
        grid = PatchGrid(tokens, g, g)
        for i in range(cfg.depth):
            grid = bb.block_forward(grid, i, training=self.training, rng=rng)
        flat = grid.flat  # [N, g*g, C]
        pred = self.decoder(flat)

        loss = None
        total = 0
        for i, (masked, tgt) in enumerate(zip(masked_lists, targets)):
            p_i = pred[i][masked]
            d = p_i - Tensor(tgt)
            term = (d * d).sum()
            loss = term if loss is None else loss + term
            total += tgt.size
        return loss * (1.0 / total)


def pretrain_toy(cfg: BackboneConfig, mask_ratio: float, epochs: int, dataset,
                 seed: int = 0, batch_size: int = 8, lr: float = 1.6e-3,
                 wd: float = 0.05):
    """Masked-patch pixel-reconstruction pre-training on the toy dataset.

    Returns (Checkpoint, Curve); the checkpoint carries the backbone
    parameters plus abs-pos metadata for the transfer rules.
    """
    model = MaskedReconstructor(cfg, seed=seed)
    rng = np.random.default_rng((seed, 0x9AE))
    samples = [dataset[i] for i in range(len(dataset))]
    steps_per_epoch = max(1, -(-len(samples) // batch_size))
    total_steps = max(epochs * steps_per_epoch, 1)
    warmup = warmup_steps_for(0.25, steps_per_epoch)
    opt = AdamW(dict(model.named_parameters()), lr=lr, weight_decay=wd)
    curve = Curve(init_mode="pretext")

    step = 0
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(samples))
        losses = []
        for batch_idx in _batches(order, batch_size):
            images = np.stack([samples[i].image for i in batch_idx])
            lr_t = lr_at(step, total_steps, warmup, lr)
            loss = model.reconstruction_loss(images, mask_ratio, rng)
            opt.zero_grad()
            loss.backward()
            opt.step(lr_t)
            losses.append(loss.item())
            step += 1
        curve.add(epoch, float(np.mean(losses)), float(np.mean(losses)),
                  lr_at(min(step, total_steps), total_steps, warmup, lr),
                  time.perf_counter() - t0)

    params = {name: p.data.copy() for name, p in model.backbone.named_parameters()}
    ckpt = Checkpoint(params, checkpoint_metadata(cfg, provenance="pretext"))
    return ckpt, curve
