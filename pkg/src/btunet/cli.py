"""Command-line entry points.

    btunet synth --count N --size S --out DIR --seed K
    btunet pretrain --config FILE [--out PATH]
    btunet finetune --config FILE --encoder-ckpt PATH [--out PATH]
    btunet eval --ckpt PATH --data DIR
    btunet experiment --config FILE --out DIR
    btunet report --in DIR --format csv|json

`pretrain` and `finetune` run one configuration drawn from the experiment
config (first variant/seed/fraction unless overridden); `experiment` runs
the whole grid.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import Checkpoint
from .data import (
    DatasetManifest,
    Record,
    SynthSpec,
    generate_synthetic,
    limit_labels,
    load_dataset,
    load_image_stack,
    make_folds,
    split,
)
from .errors import CheckpointError
from .experiment import (
    build_report,
    collect_rows,
    dataset_channels,
    derive_seed,
    make_arch,
    parse_experiment_config,
    report_csv_text,
    run_experiment,
)
from .models import ModelArchConfig, Variant, build_encoder, build_model
from .optim import TrainConfig
from .selfsup import BTConfig, build_projection_head, pretrain
from .train import evaluate, finetune, transfer_encoder


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="btunet", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic shape-segmentation dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shapes", choices=["ellipses", "blobs"], default="ellipses")
    p.add_argument("--objects", type=int, nargs=2, default=(1, 3), metavar=("MIN", "MAX"))
    p.add_argument("--noise", type=float, default=0.05)

    p = sub.add_parser("pretrain", help="pre-train one encoder from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="checkpoint path (default derived)")
    p.add_argument("--variant", default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("finetune", help="fine-tune one model from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--encoder-ckpt", default=None, help="pre-trained encoder to transfer")
    p.add_argument("--out", default=None, help="checkpoint path (default derived)")
    p.add_argument("--variant", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--fold", type=int, default=0)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint on a dataset directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--pooled", action="store_true")

    p = sub.add_parser("experiment", help="run the full experiment grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("report", help="aggregate rows from an experiment directory")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    return parser


def _cmd_synth(args) -> int:
    spec = SynthSpec(
        count=args.count,
        size=args.size,
        shape_family=args.shapes,
        objects_min=args.objects[0],
        objects_max=args.objects[1],
        noise=args.noise,
        seed=args.seed,
    )
    manifest = generate_synthetic(spec, args.out)
    manifest.save(Path(args.out) / "manifest.json")
    print(f"wrote {len(manifest.records)} image/mask pairs under {args.out}")
    return 0


def _single_run_settings(args):
    cfg = parse_experiment_config(args.config)
    variant = Variant.parse(args.variant) if args.variant else cfg.variants[0]
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    return cfg, variant, seed


def _cmd_pretrain(args) -> int:
    cfg, variant, seed = _single_run_settings(args)
    channels = dataset_channels(cfg.dataset.root)
    manifest = split(
        load_dataset(cfg.dataset.root), cfg.dataset.train_frac,
        seed=derive_seed(seed, "split"),
    )
    images = load_image_stack(
        manifest.pretrain_records(), cfg.dataset.image_size, channels
    )
    encoder = build_encoder(make_arch(cfg, variant, seed, "pretrain-init", channels))
    bt_cfg = BTConfig(
        lambda_=cfg.pretrain.lambda_,
        crop_scale=cfg.pretrain.crop_scale,
        rotation_degrees=cfg.pretrain.rotation_degrees,
        batch_size=cfg.pretrain.batch_size,
        epochs=cfg.pretrain.epochs,
        seed=derive_seed(seed, "augment"),
    )
    head = build_projection_head(encoder, bt_cfg)
    train_cfg = TrainConfig(
        learning_rate=cfg.finetune.learning_rate,
        plateau_factor=cfg.finetune.plateau_factor,
        plateau_patience=cfg.finetune.plateau_patience,
        early_stop_patience=cfg.finetune.early_stop_patience,
        max_epochs=cfg.pretrain.epochs,
        batch_size=cfg.pretrain.batch_size,
        seed=derive_seed(seed, "pretrain-loop"),
    )
    result = pretrain(encoder, head, images, bt_cfg, train_cfg, log_fn=print)
    out = args.out or f"pretrain_{variant.value}_seed{seed}.ckpt"
    result.checkpoint.save(out)
    print(f"pre-trained {variant.value} for {result.epochs_run} epochs "
          f"(final loss {result.final_loss:.5f}) -> {out}")
    return 0


def _cmd_finetune(args) -> int:
    cfg, variant, seed = _single_run_settings(args)
    fraction = args.fraction if args.fraction is not None else cfg.fractions[0]
    manifest = load_dataset(cfg.dataset.root)
    manifest = split(manifest, cfg.dataset.train_frac, seed=derive_seed(seed, "split"))
    manifest = limit_labels(manifest, fraction, seed=derive_seed(seed, "labels"))
    manifest = make_folds(manifest, cfg.folds_k, seed=derive_seed(seed, "folds"))
    channels = dataset_channels(cfg.dataset.root)
    model = build_model(make_arch(cfg, variant, seed, "init", channels))
    if args.encoder_ckpt:
        transfer_encoder(Checkpoint.load(args.encoder_ckpt), model)
        print(f"transferred encoder weights from {args.encoder_ckpt}")
    ft = cfg.finetune
    train_cfg = TrainConfig(
        learning_rate=ft.learning_rate,
        plateau_factor=ft.plateau_factor,
        plateau_patience=ft.plateau_patience,
        early_stop_patience=ft.early_stop_patience,
        max_epochs=ft.max_epochs,
        batch_size=ft.batch_size,
        seed=derive_seed(seed, variant.value, f"finetune-f{args.fold}"),
    )
    result = finetune(model, manifest, train_cfg, val_fold=args.fold, log_fn=print)
    out = args.out or f"finetune_{variant.value}_seed{seed}_fold{args.fold}.ckpt"
    result.checkpoint.save(out)
    metrics = evaluate(model, manifest, batch_size=ft.batch_size)
    print(json.dumps({"checkpoint": str(out), **metrics}, indent=1))
    return 0


def _cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    if ckpt.phase != "FINETUNE":
        raise CheckpointError("eval needs a FINETUNE checkpoint with full model weights")
    arch = ModelArchConfig.from_dict(ckpt.arch)
    model = build_model(arch)
    model.load_state_arrays(ckpt.tensors)
    scanned = load_dataset(args.data)
    records = [
        replace(r, split="test") for r in scanned.records if r.mask_path is not None
    ]
    manifest = DatasetManifest(root=scanned.root, records=records)
    metrics = evaluate(model, manifest, batch_size=args.batch_size, pooled=args.pooled)
    print(json.dumps(metrics, indent=1))
    return 0


def _cmd_experiment(args) -> int:
    log = (lambda msg: None) if args.quiet else print
    report = run_experiment(args.config, args.out, log_fn=log)
    ok = [r for r in report["rows"] if r.get("status") == "ok"]
    failed = [r for r in report["rows"] if r.get("status") != "ok"]
    print(f"completed {len(ok)} runs ({len(failed)} failed); "
          f"reports in {args.out}/report.csv and report.json")
    for agg in report["aggregates"]:
        print(
            f"  {agg['variant']} bt={agg['bt']} fraction={agg['fraction']}: "
            f"DC {agg['dc_mean']:.4f}+-{agg['dc_std']:.4f} "
            f"mIoU {agg['miou_mean']:.4f}"
        )
    return 1 if failed and not ok else 0


def _cmd_report(args) -> int:
    rows = collect_rows(args.in_dir)
    report = build_report(rows, digest="")
    if args.format == "csv":
        sys.stdout.write(report_csv_text(report))
    else:
        json.dump(report, sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "experiment": _cmd_experiment,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
