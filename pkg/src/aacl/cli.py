"""Command-line entry point: ``aacl <command> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import augment, harness
from .data import SceneSpec, generate_dataset
from .raster import read_ppm, write_ppm


def _dataset_gen(args):
    spec = SceneSpec(size=args.size)
    generate_dataset(args.out, args.seed, args.count, args.test_count, spec)
    print(f"wrote {args.count} train + {args.test_count} test scenes to {args.out}")
    return 0


def _load_cfg(args):
    cfg = harness.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "log_adacm", False):
        cfg = cfg.replace(log_adacm=True)
    return cfg


def _train(args):
    cfg = _load_cfg(args)
    record = harness.run_training(cfg, args.data, args.out, resume=args.resume)
    print(f"final mIoU {record.final_miou:.4f}  best {record.best_miou:.4f} @ epoch {record.best_epoch}")
    return 0


def _eval(args):
    report = harness.evaluate_checkpoint(args.ckpt, args.data, args.num_classes, args.role)
    sys.stdout.write(report.to_csv(harness._class_names(args.num_classes)))
    return 0


def _preview_name(op, param):
    return f"{op.value}_none" if param is None else f"{op.value}_{param:.4g}"


def _augment_preview(args):
    image = read_ppm(args.image)
    recipe = augment.sample_recipe(args.k, args.seed)
    os.makedirs(args.out, exist_ok=True)
    for op, param in recipe.steps:
        write_ppm(augment.apply_op(image, op, param), os.path.join(args.out, _preview_name(op, param) + ".ppm"))
    write_ppm(augment.usaug(image, recipe), os.path.join(args.out, f"usaug_k{args.k}.ppm"))
    print(recipe.describe())
    return 0


def _experiment_dirs(args, default_out):
    out = args.out or default_out
    data = args.data or os.path.join(out, "data")
    os.makedirs(out, exist_ok=True)
    return data, out


def _sweep_k(args):
    cfg = _load_cfg(args)
    data, out = _experiment_dirs(args, "sweep_k_out")
    harness.ensure_dataset(cfg, data)
    k_values = args.k_values or list(range(1, 11))
    text, _ = harness.sweep_k(cfg, data, out, k_values, args.seeds)
    sys.stdout.write(text)
    return 0


def _ablate(args):
    cfg = _load_cfg(args)
    data, out = _experiment_dirs(args, "ablation_out")
    harness.ensure_dataset(cfg, data)
    text, _ = harness.ablate(cfg, data, out, args.seeds)
    sys.stdout.write(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="aacl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="synthetic dataset tools")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)
    gen = ds_sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--count", type=int, default=80, help="training scenes")
    gen.add_argument("--test-count", type=int, default=20)
    gen.add_argument("--size", type=int, default=64)
    gen.set_defaults(func=_dataset_gen)

    tr = sub.add_parser("train", help="train one model")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, help="override the config seed")
    tr.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    tr.add_argument("--log-adacm", action="store_true", help="write per-image mixing decisions")
    tr.set_defaults(func=_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint; prints per-class IoU CSV")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--num-classes", type=int, default=5)
    ev.add_argument("--role", default="test")
    ev.set_defaults(func=_eval)

    pv = sub.add_parser("augment-preview", help="write each sampled op and the composite")
    pv.add_argument("--image", required=True)
    pv.add_argument("--k", type=int, default=8)
    pv.add_argument("--seed", type=int, default=0)
    pv.add_argument("--out", required=True)
    pv.set_defaults(func=_augment_preview)

    for name, func, help_text in (("sweep-k", _sweep_k, "one run per k with plain CutMix"),
                                  ("ablate", _ablate, "the four module on/off combinations")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--data", help="dataset dir (generated from the config if missing)")
        p.add_argument("--out", help="output dir")
        p.add_argument("--seeds", type=int, nargs="+", help="defaults to the config seed")
        p.add_argument("--log-adacm", action="store_true")
        if name == "sweep-k":
            p.add_argument("--k-values", type=int, nargs="+")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"aacl: error: {exc}", file=sys.stderr)
        return 2
