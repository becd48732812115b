"""Command-line surface: gen-data, train, eval, ablate, dump-attn, grad-check.

Exit codes: 0 on success, 2 for configuration problems, 3 for numeric
failures during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .errors import ConfigError, ContractError, FormatError, NumericError
from .evaluation import evaluate_model
from .scenes import class_table, generate_dataset, load_dataset, save_dataset
from .training import ablate, dump_attention, grad_check, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON run configuration (defaults apply if omitted)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the configured seed")
    parser.add_argument("--out", type=Path, default=Path("runs/out"),
                        help="output directory")


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _cmd_gen_data(args) -> int:
    cfg = _load(args)
    args.out.mkdir(parents=True, exist_ok=True)
    spec = cfg.data.spec
    train_scenes = generate_dataset(spec, cfg.seed, cfg.data.num_train)
    val_scenes = generate_dataset(spec, cfg.seed + cfg.data.num_train, cfg.data.num_val)
    save_dataset(args.out / "train.json", spec, cfg.seed, train_scenes)
    save_dataset(args.out / "val.json", spec, cfg.seed + cfg.data.num_train, val_scenes)
    print(f"wrote {len(train_scenes)} train / {len(val_scenes)} val scenes to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load(args)
    result = train(cfg, args.out, quiet=args.quiet)
    if args.figures:
        from .reporting import render_training_figure
        render_training_figure(args.out / "metrics.csv", args.out / "training.png")
    print(f"final val mAP {result.final_map:.4f} "
          f"(epochs to {cfg.eval.map_target}: {result.epochs_to_target})")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _load(args)
    params = load_checkpoint(args.ckpt)
    if args.data is not None:
        spec, _, scenes = load_dataset(args.data)
    else:
        spec = cfg.data.spec
        scenes = generate_dataset(spec, cfg.seed + cfg.data.num_train, cfg.data.num_val)
    table = class_table(spec.num_classes, params.config.dim)
    report = evaluate_model(params, scenes, table,
                            iou_threshold=cfg.eval.iou_threshold)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["verb", "ap", "true_positives", "false_positives", "gt_count"])
        for v in sorted(report.per_verb_ap):
            writer.writerow([v, repr(report.per_verb_ap[v]), report.true_positives[v],
                             report.false_positives[v], report.gt_counts[v]])
    print(f"mAP {report.mean_ap:.4f} over {len(scenes)} scenes "
          f"({sum(report.gt_counts.values())} ground truths)")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _load(args)
    strategies = args.strategies.split(",") if args.strategies else None
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = ablate(cfg, args.out, strategies=strategies, seeds=seeds,
                  workers=args.workers)
    if args.figures:
        from .reporting import render_ablation_figure
        render_ablation_figure(args.out, args.out / "ablation.png")
    for row in rows:
        if row["seed"] == "median":
            print(f"{row['strategy']:10s} median final mAP {row['final_map']:.4f} "
                  f"median epochs-to-target {row['epochs_to_target']}")
    return EXIT_OK


def _cmd_dump_attn(args) -> int:
    cfg = _load(args)
    params = load_checkpoint(args.ckpt)
    if args.data is not None:
        spec, _, scenes = load_dataset(args.data)
    else:
        spec = cfg.data.spec
        scenes = generate_dataset(spec, cfg.seed + cfg.data.num_train, cfg.data.num_val)
    if not (0 <= args.scene_index < len(scenes)):
        raise ConfigError(f"scene index {args.scene_index} out of range")
    scene = scenes[args.scene_index]
    table = class_table(spec.num_classes, params.config.dim)
    written = dump_attention(params, scene, table, args.out)
    if args.figures:
        from .reporting import render_attention_figure
        render_attention_figure(written, args.out / "attention.png",
                                scene.grid_h, scene.grid_w)
    print(f"wrote {len(written)} attention maps to {args.out}")
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    cfg = _load(args)
    report = grad_check(cfg)
    worst = 0.0
    for strategy, groups in report.items():
        for group, err in sorted(groups.items()):
            print(f"{strategy:10s} {group:12s} max relative error {err:.3e}")
        worst = max(worst, max(groups.values()))
    print(f"overall max relative error {worst:.3e}")
    if args.out != Path("runs/out"):
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "grad_check.json").write_text(json.dumps(report, indent=2))
    return EXIT_OK if worst < 1e-4 else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hoidet",
        description="Desk-scale HOI set-prediction detector with hard-positive "
                    "query training on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and serialize datasets")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train one run")
    _add_common(p)
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    p.add_argument("--figures", action="store_true", help="render training.png")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--data", type=Path, default=None, help="dataset JSON (default: regenerate val split)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train a strategy grid and tabulate")
    _add_common(p)
    p.add_argument("--strategies", default=None, help="comma-separated strategy list")
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--workers", type=int, default=None, help="parallel runs (0 = auto)")
    p.add_argument("--figures", action="store_true", help="render ablation.png")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("dump-attn", help="dump per-layer/head attention maps")
    _add_common(p)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--data", type=Path, default=None, help="dataset JSON")
    p.add_argument("--scene-index", type=int, default=0)
    p.add_argument("--figures", action="store_true", help="render attention.png")
    p.set_defaults(func=_cmd_dump_attn)

    p = sub.add_parser("grad-check", help="finite-difference check per strategy")
    _add_common(p)
    p.set_defaults(func=_cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
