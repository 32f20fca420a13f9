"""Command-line surface: pretrain, finetune, hpo, bench, count, export-curves.

Config files are INI-style typed key/value sections; unknown sections or keys
are rejected. Machine output goes to stdout or files under --out; progress
goes to stderr. Every run writes its resolved config next to its outputs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .complexity import (ComplexityReport, bench, compare_strategies, count_flops,
                         count_params, format_table, STRATEGIES)
from .data import ShapesConfig, ShapesDataset
from .hpo import AuditLog, run_protocol, synthetic_quadratic
from .train import Curve, DenseDetector, TrainFormula, finetune, pretrain_toy


class UsageError(ValueError):
    pass


_MODEL_KEYS = {
    "depth": int, "embed_dim": int, "num_heads": int, "mlp_ratio": float,
    "patch_size": int, "window_size": int, "img_size": int,
    "use_abs_pos": bool, "use_rel_pos": bool, "layer_scale_init": float,
    "drop_path_rate": float,
}
_TRAIN_KEYS = {
    "lr": float, "wd": float, "dp": float, "beta1": float, "beta2": float,
    "epochs": int, "warmup_epochs": float, "batch_size": int,
    "resolution": int, "scale_lo": float, "scale_hi": float,
}
_DATA_KEYS = {
    "image_size": int, "min_objects": int, "max_objects": int,
    "min_size": int, "max_size": int, "noise_level": float,
    "train_size": int, "eval_size": int,
}
_SECTIONS = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "data": _DATA_KEYS}


def _parse_value(raw: str, typ):
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"not a boolean: {raw}")
    return typ(raw)


def read_config(path: str) -> dict:
    """Parse and validate the sectioned config file; unknown keys rejected."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise UsageError(f"cannot read config file: {path}")
    out: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise UsageError(f"unknown config section: [{section}]")
        keys = _SECTIONS[section]
        out[section] = {}
        for key, raw in parser.items(section):
            if key not in keys:
                raise UsageError(f"unknown key in [{section}]: {key}")
            out[section][key] = _parse_value(raw, keys[key])
    return out


def build_backbone_config(conf: dict) -> BackboneConfig:
    return BackboneConfig(**conf.get("model", {}))


def build_formula(conf: dict, epochs_override: int | None = None) -> TrainFormula:
    t = dict(conf.get("train", {}))
    betas = (t.pop("beta1", 0.9), t.pop("beta2", 0.999))
    scale = (t.pop("scale_lo", 0.1), t.pop("scale_hi", 2.0))
    formula = TrainFormula(betas=betas, scale_range=scale, **t)
    if epochs_override is not None:
        formula.epochs = epochs_override
        if formula.warmup_epochs >= max(epochs_override, 1):
            formula.warmup_epochs = 0.25
    return formula


def build_datasets(conf: dict, seed: int):
    d = dict(conf.get("data", {}))
    train_size = d.pop("train_size", 64)
    eval_size = d.pop("eval_size", 16)
    scfg = ShapesConfig(**d)
    return (ShapesDataset(scfg, seed, train_size),
            [ShapesDataset(scfg, seed + 1, eval_size)[i] for i in range(eval_size)])


def _resolve_out(args) -> Path:
    out = args.out or os.environ.get("VITDET_OUT")
    if not out:
        raise UsageError("--out (or VITDET_OUT) is required")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_resolved(out: Path, args, conf: dict):
    resolved = {"command": args.command, "seed": args.seed, "config": conf,
                "argv": sys.argv[1:]}
    with open(out / "resolved_config.json", "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)


def _progress(msg: str):
    print(msg, file=sys.stderr)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    conf = read_config(args.config) if args.config else {}
    out = _resolve_out(args)
    _write_resolved(out, args, conf)
    cfg = build_backbone_config(conf)
    train_ds, _ = build_datasets(conf, args.seed)
    epochs = args.epochs if args.epochs is not None else 20
    _progress(f"pretraining for {epochs} epochs, mask ratio {args.mask_ratio}")
    ckpt, curve = pretrain_toy(cfg, args.mask_ratio, epochs, train_ds, seed=args.seed)
    save_checkpoint(ckpt.params, out / "pretext.ckpt", ckpt.metadata)
    curve.write_csv(out / "curve.csv")
    curve.write_json(out / "curve.json")
    print(json.dumps({"checkpoint": str(out / "pretext.ckpt"),
                      "final_loss": curve.final_loss()}))
    return 0


def cmd_finetune(args) -> int:
    conf = read_config(args.config) if args.config else {}
    out = _resolve_out(args)
    _write_resolved(out, args, conf)
    cfg = build_backbone_config(conf)
    formula = build_formula(conf, args.epochs)
    train_ds, eval_samples = build_datasets(conf, args.seed)
    init = "random" if args.init == "random" else load_checkpoint(args.init)
    _progress(f"fine-tuning for {formula.epochs} epochs from {args.init}")
    curve = finetune(cfg, formula, init, train_ds, seed=args.seed,
                     eval_samples=eval_samples)
    curve.write_csv(out / "curve.csv")
    curve.write_json(out / "curve.json")
    print(json.dumps({"epochs": formula.epochs, "final_metric": curve.records[-1]["metric"]}))
    return 0


def cmd_hpo(args) -> int:
    out = _resolve_out(args)
    conf = read_config(args.config) if args.config else {}
    _write_resolved(out, args, conf)
    if args.evaluator == "synthetic-quadratic":
        surface = synthetic_quadratic()
        lr_wd_eval = surface
        dp_eval = lambda dp: -(dp - 0.1) ** 2  # planted optimum at dp = 0.1
        dp_eval_large = lambda dp: -(dp - 0.3) ** 2
    elif args.evaluator == "shapes-train":
        cfg = build_backbone_config(conf)
        train_ds, eval_samples = build_datasets(conf, args.seed)
        epochs = args.epochs if args.epochs is not None else 2

        def lr_wd_eval(lr, wd):
            formula = build_formula(conf, epochs)
            formula.lr, formula.wd, formula.dp = lr, wd, 0.0
            curve = finetune(build_backbone_config(conf), formula, "random", train_ds,
                             seed=args.seed, eval_samples=eval_samples)
            return -curve.records[-1]["metric"]

        def dp_eval(dp):
            formula = build_formula(conf, epochs)
            formula.dp = dp
            curve = finetune(build_backbone_config(conf), formula, "random", train_ds,
                             seed=args.seed, eval_samples=eval_samples)
            return -curve.records[-1]["metric"]

        dp_eval_large = dp_eval
    else:
        raise UsageError(f"unknown evaluator: {args.evaluator}")

    log = AuditLog()
    center = (args.center_lr, args.center_wd)
    result = run_protocol(lr_wd_eval, dp_eval, dp_eval_large, center=center, log=log)
    log.save(out / "audit.json")
    payload = {"base": result.base_formula, "large": result.large_formula,
               "expansions": result.grid.expansions, "boundary": result.grid.boundary,
               "evaluations": len(log.entries)}
    with open(out / "hpo_result.json", "w") as f:
        json.dump(payload, f, indent=2)
    print(json.dumps(payload))
    return 0


def cmd_bench(args) -> int:
    conf = read_config(args.config) if args.config else {}
    out = _resolve_out(args)
    _write_resolved(out, args, conf)
    cfg = build_backbone_config(conf)
    if args.strategy == "all":
        reports = compare_strategies(cfg, trials=args.trials, seed=args.seed)
        _progress(format_table(reports))
        payload = [json.loads(r.to_json()) for r in reports]
    else:
        report = bench(cfg, args.strategy, trials=args.trials, seed=args.seed)
        payload = json.loads(report.to_json())
    with open(out / "bench.json", "w") as f:
        json.dump(payload, f, indent=2)
    print(json.dumps(payload))
    return 0


def cmd_count(args) -> int:
    conf = read_config(args.config) if args.config else {}
    cfg = build_backbone_config(conf)
    model = DenseDetector(cfg, seed=args.seed)
    total, itemized = count_params(model.backbone)
    report = ComplexityReport(
        strategy="hybrid_4_global",
        params=total,
        flops=count_flops(cfg, (cfg.img_size, cfg.img_size)),
    )
    payload = json.loads(report.to_json())
    payload["itemized_params"] = itemized
    payload["detector_params"] = model.num_params()
    print(json.dumps(payload, indent=2))
    return 0


def cmd_export_curves(args) -> int:
    rows = []
    missing = []
    for run_dir in args.run_dirs:
        curve_path = Path(run_dir) / "curve.json"
        if not curve_path.exists():
            missing.append(str(curve_path))
            continue
        curve = Curve.read_json(curve_path)
        run_id = Path(run_dir).name
        for rec in curve.records:
            rows.append([run_id, curve.init_mode, rec["epoch"], rec["loss"],
                         rec["metric"], rec["lr"], rec["seconds"]])
    for m in missing:
        _progress(f"missing curve file, run skipped: {m}")
    if not rows and missing:
        print("error: no curve files found", file=sys.stderr)
        return 1
    rows.sort(key=lambda r: (r[0], r[2]))
    writer = csv.writer(sys.stdout)
    writer.writerow(["run_id", "init_mode", "epoch", "loss", "metric", "lr", "seconds"])
    writer.writerows(rows)
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitdetbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretext training")
    common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the toy detector")
    common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--init", default="random", help="'random' or a checkpoint path")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("hpo", help="run the three-stage tuning protocol")
    common(p)
    p.add_argument("--evaluator", default="synthetic-quadratic",
                   choices=["synthetic-quadratic", "shapes-train"])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--center-lr", type=float, default=1.6e-4)
    p.add_argument("--center-wd", type=float, default=0.1)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_hpo)

    p = sub.add_parser("bench", help="benchmark attention strategies")
    common(p)
    p.add_argument("--strategy", default="all", choices=("all",) + STRATEGIES)
    p.add_argument("--trials", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("count", help="analytic params/flops report")
    common(p)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("export-curves", help="merge run curves into one CSV")
    p.add_argument("run_dirs", nargs="+")
    p.set_defaults(func=cmd_export_curves)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else 2
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # one-line machine-parseable error
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
