"""Command-line entry point: train, sweep, and predict subcommands."""

from __future__ import annotations

import argparse
import logging
import sys

from .data import WaveFieldDataset
from .model import CrackDetector
from .predict import predict_export
from .sweep import format_table, sweep
from .train import TrainConfig, load_checkpoint, train


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        alpha=args.alpha,
        gamma=args.gamma,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        device=args.device,
        augment_flips=args.augment,
    )


def cmd_train(args) -> int:
    train_set = WaveFieldDataset(args.manifest, "train")
    eval_set = WaveFieldDataset(args.manifest, "test")
    model = CrackDetector(time_steps=train_set.time_steps)
    config = _train_config(args)
    history = train(model, train_set, eval_set, config, args.out)
    best = max(h["dsc"] for h in history)
    print(f"trained {config.epochs} epochs; best eval DSC {best:.3f}; checkpoints in {args.out}")
    return 0


def cmd_sweep(args) -> int:
    rows = sweep(
        args.manifest,
        args.alpha,
        args.gamma,
        _train_config(argparse.Namespace(**{**vars(args), "alpha": 0.5, "gamma": 0.0})),
        args.out,
    )
    print(format_table(rows))
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = WaveFieldDataset(args.manifest, args.split)
    paths = predict_export(model, dataset, args.out, args.batch_size, args.device)
    print(f"wrote {len(paths)} prediction grids to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latticewave-detector",
        description="Train and run the crack-detection network.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", default="runs")
        p.add_argument("--lr", type=float, default=2e-4)
        p.add_argument("--epochs", type=int, default=150)
        p.add_argument("--batch-size", type=int, default=16)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--device", default="cpu")
        p.add_argument("--augment", action="store_true",
                       help="random mirror augmentation during training")

    p_train = sub.add_parser("train", help="train one model")
    common(p_train)
    p_train.add_argument("--alpha", type=float, default=0.25)
    p_train.add_argument("--gamma", type=float, default=2.0)
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="train a grid of (alpha, gamma) models")
    common(p_sweep)
    p_sweep.add_argument("--alpha", type=float, nargs="+", required=True)
    p_sweep.add_argument("--gamma", type=float, nargs="+", required=True)
    p_sweep.set_defaults(func=cmd_sweep)

    p_pred = sub.add_parser("predict", help="export prediction grids")
    p_pred.add_argument("--manifest", required=True)
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--split", default="test")
    p_pred.add_argument("--out", default="predictions")
    p_pred.add_argument("--batch-size", type=int, default=16)
    p_pred.add_argument("--device", default="cpu")
    p_pred.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
