#!/usr/bin/env python3
"""
voxsynth - volumetric cross-modal synthesis toolkit

Command-line entry point. Subcommands:
    phantom      generate a paired phantom dataset
    train        train the U-Net or the patch baseline, per cross-validation round
    synthesize   predict target volumes from checkpoints
    evaluate     MAE / PSNR / SSIM reports and the method comparison table
    classify     two-class accuracy table with a paired t-test

Exit code is 0 on success; errors go to stderr as ``ERROR:<category>:<message>``.
"""

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional

from errors import ConfigError, VoxSynthError
from pipeline import Pipeline
from run_config import resolve_config, setup_logging

CONFIG_FLAGS = (
    "profile", "seed", "threads", "strict", "log_level",
    "depth", "base_channels", "size", "lr", "epochs", "batch_size", "loss",
    "folds", "fold", "fold_seed", "patch_samples", "patch_batch", "patch_stride",
    "max_intensity", "ssim_c1", "ssim_c2", "feature_grid", "lambda_grid",
    "n", "mode", "amplitude", "balance",
)


class _Parser(argparse.ArgumentParser):
    """Usage errors become config errors; subcommand parsers inherit this class."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--strict", action="store_const", const=True, default=None,
                        help="single worker and single-schedule kernels for bit-exact runs")
    parser.add_argument("--profile", choices=["desk", "paper"])
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--log-level", dest="log_level")


def _named_dirs(values: Optional[List[str]], flag: str) -> Dict[str, Path]:
    """``name=DIR`` pairs; a bare DIR is named after the directory."""
    named: Dict[str, Path] = {}
    for value in values or []:
        name, sep, directory = value.partition("=")
        if not sep:
            name, directory = Path(value).name, value
        if not name or not directory:
            raise ConfigError(f"{flag} expects NAME=DIR, got {value!r}")
        if name in named:
            raise ConfigError(f"{flag} name {name!r} given twice")
        named[name] = Path(directory)
    return named


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxsynth", description="Volumetric cross-modal synthesis toolkit")
    commands = parser.add_subparsers(dest="command", required=True)

    phantom = commands.add_parser("phantom", help="generate a paired phantom dataset")
    _common(phantom)
    phantom.add_argument("--n", type=int)
    phantom.add_argument("--size", type=int)
    phantom.add_argument("--mode", choices=["local", "nonlocal"])
    phantom.add_argument("--amplitude", type=float)
    phantom.add_argument("--balance", choices=["strict", "loose"])

    train = commands.add_parser("train", help="train a model per cross-validation round")
    _common(train)
    train.add_argument("--method", choices=["unet", "patch"], default="unet")
    train.add_argument("--data", required=True, help="dataset directory or manifest")
    train.add_argument("--fold", help="round index or 'all'")
    train.add_argument("--folds", type=int)
    train.add_argument("--fold-seed", dest="fold_seed", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--loss", choices=["bce", "mse"])
    train.add_argument("--depth", type=int)
    train.add_argument("--base-channels", dest="base_channels", type=int)
    train.add_argument("--patch-samples", dest="patch_samples", type=int)
    train.add_argument("--patch-batch", dest="patch_batch", type=int)
    train.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")

    synthesize = commands.add_parser("synthesize", help="predict volumes from checkpoints")
    _common(synthesize)
    synthesize.add_argument("--checkpoint", action="append", required=True,
                            help="checkpoint file; repeat for one checkpoint per round")
    synthesize.add_argument("--data", help="dataset; subjects are routed to the round that held them out")
    synthesize.add_argument("--input", action="append", default=[], help="single input volume")
    synthesize.add_argument("--slices", action="store_true", help="export PGM slice triplets")
    synthesize.add_argument("--patch-stride", dest="patch_stride", type=int)
    synthesize.add_argument("--folds", type=int)
    synthesize.add_argument("--fold-seed", dest="fold_seed", type=int)

    evaluate = commands.add_parser("evaluate", help="score predictions against targets")
    _common(evaluate)
    evaluate.add_argument("--pred", action="append", required=True, help="NAME=DIR of predictions")
    evaluate.add_argument("--data", required=True, help="dataset holding the targets")
    evaluate.add_argument("--mask-dir", dest="mask_dir", help="coverage masks applied to every method")
    evaluate.add_argument("--labels", help="integer label volume for ROI metrics")
    evaluate.add_argument("--max-intensity", dest="max_intensity", type=float)
    evaluate.add_argument("--ssim-c1", dest="ssim_c1", type=float)
    evaluate.add_argument("--ssim-c2", dest="ssim_c2", type=float)

    classify = commands.add_parser("classify", help="classification accuracy table and t-test")
    _common(classify)
    classify.add_argument("--data", required=True)
    classify.add_argument("--synth", action="append", required=True, help="NAME=DIR of synthesized volumes")
    classify.add_argument("--folds", type=int)
    classify.add_argument("--fold-seed", dest="fold_seed", type=int)
    classify.add_argument("--feature-grid", dest="feature_grid", type=int)
    classify.add_argument("--lambda-grid", dest="lambda_grid", help="comma-separated lambda values")
    return parser


def run(args: argparse.Namespace) -> str:
    flags = {key: getattr(args, key) for key in CONFIG_FLAGS if getattr(args, key, None) is not None}
    config = resolve_config(flags, args.config)
    setup_logging(config.log_level)
    pipeline = Pipeline(config)

    if args.command == "phantom":
        result = pipeline.phantom(args.out)
        return (f"phantom: {result['subjects']} subjects ({result['class_0']} class 0, "
                f"{result['class_1']} class 1), {result['size']}^3, {result['mode']}\n"
                f"manifest: {result['manifest']}\n")
    if args.command == "train":
        result = pipeline.train(args.method, args.data, args.out, args.resume)
        lines = [f"train: {result['method']}"]
        for round_index, info in result["rounds"].items():
            lines.append(f"fold {round_index}: step {info['step']}, checkpoint {info['checkpoint']}")
        return "\n".join(lines) + "\n"
    if args.command == "synthesize":
        result = pipeline.synthesize(args.checkpoint, args.out, args.data, args.input, args.slices)
        return f"synthesize: {result['predictions']} prediction(s) written to {result['out']}\n"
    if args.command == "evaluate":
        result = pipeline.evaluate(_named_dirs(args.pred, "--pred"), args.data, args.out,
                                   args.mask_dir, args.labels)
        return result["table"]
    if args.command == "classify":
        result = pipeline.classify(args.data, _named_dirs(args.synth, "--synth"), args.out)
        return result["table"]
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for voxsynth"""
    try:
        summary = run(build_parser().parse_args(argv))
    except VoxSynthError as e:
        print(f"ERROR:{e.category}:{e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"ERROR:io:{e}", file=sys.stderr)
        return 1
    sys.stdout.write(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
