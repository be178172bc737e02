"""Hyperparameter sweep: one training run per (alpha, gamma) pair."""

from __future__ import annotations

import dataclasses
import logging
import os

import torch
from torch.utils.data import DataLoader

from .data import WaveFieldDataset
from .model import CrackDetector
from .predict import predict_export
from .train import TrainConfig, grid_metrics, load_checkpoint, train

logger = logging.getLogger(__name__)

TABLE_HEADER = (
    f"{'alpha':>6} {'gamma':>6} {'prec.':>7} {'recall':>7} {'IoU':>7} {'DSC':>7} {'accu.':>7}"
)


@torch.no_grad()
def pooled_precision_recall(model, dataset, config: TrainConfig):
    model.eval()
    tp = fp = fn = 0.0
    for x, y in DataLoader(dataset, batch_size=config.batch_size):
        pred = (model(x.to(config.device)) > config.t_bin).float()
        truth = (y.to(config.device) > 0.5).float()
        tp += float((pred * truth).sum())
        fp += float((pred * (1 - truth)).sum())
        fn += float(((1 - pred) * truth).sum())
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


def sweep(
    manifest_path: str,
    alphas,
    gammas,
    base_config: TrainConfig,
    out_dir: str,
    export_predictions: bool = True,
) -> list[dict]:
    """Train and evaluate every (alpha, gamma) combination; failures are logged
    and recorded as rows with an error field, and the sweep continues."""
    os.makedirs(out_dir, exist_ok=True)
    train_set = WaveFieldDataset(manifest_path, "train")
    test_set = WaveFieldDataset(manifest_path, "test")
    rows = []
    for alpha in alphas:
        for gamma in gammas:
            tag = f"a{alpha:g}_g{gamma:g}"
            run_dir = os.path.join(out_dir, tag)
            config = dataclasses.replace(base_config, alpha=alpha, gamma=gamma)
            try:
                model = CrackDetector(time_steps=train_set.time_steps)
                train(model, train_set, test_set, config, run_dir)
                best = load_checkpoint(os.path.join(run_dir, "best.pt"))
                metrics = grid_metrics(best, test_set, config)
                precision, recall = pooled_precision_recall(best, test_set, config)
                if export_predictions:
                    predict_export(
                        best, test_set, os.path.join(run_dir, "predictions"),
                        config.batch_size, config.device,
                    )
                rows.append(
                    {"alpha": alpha, "gamma": gamma, "precision": precision,
                     "recall": recall, **metrics}
                )
            except Exception as exc:  # keep sweeping past individual failures
                logger.exception("run %s failed", tag)
                rows.append({"alpha": alpha, "gamma": gamma, "error": str(exc)})
    with open(os.path.join(out_dir, "sweep.txt"), "w") as fh:
        fh.write(format_table(rows) + "\n")
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [TABLE_HEADER]
    for r in rows:
        if "error" in r:
            lines.append(f"{r['alpha']:6.2f} {r['gamma']:6.2f} failed: {r['error']}")
        else:
            lines.append(
                f"{r['alpha']:6.2f} {r['gamma']:6.2f} "
                f"{r['precision']:7.3f} {r['recall']:7.3f} "
                f"{r['iou']:7.3f} {r['dsc']:7.3f} {r['accuracy']:7.3f}"
            )
    return "\n".join(lines)
