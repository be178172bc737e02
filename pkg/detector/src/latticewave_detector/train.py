"""Training loop: Adam on focal loss, best checkpoint kept by evaluation DSC."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass

import torch
from torch.utils.data import DataLoader, Dataset

from .losses import focal_loss
from .model import CrackDetector

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"loss became non-finite at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    lr: float = 2e-4
    epochs: int = 150
    batch_size: int = 16
    seed: int = 0
    device: str = "cpu"
    t_bin: float = 0.5
    checkpoint_metric: str = "dsc"  # or "accuracy"
    t_tol: float = 0.5
    augment_flips: bool = False

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("at least one epoch required")
        if self.checkpoint_metric not in ("dsc", "accuracy"):
            raise ValueError("checkpoint metric must be 'dsc' or 'accuracy'")


class MirrorAugmented(Dataset):
    """Random square-plate symmetries of receiver-grid samples.

    Each draw applies one of the eight symmetries of the square (axis
    mirrors, the diagonal mirror, and their compositions) to the 9x9
    receiver grid, permuting and negating the displacement components and
    transforming the label grid accordingly. The material is isotropic and
    the receiver lattice shares the plate's symmetry, so every transformed
    sample is the exact wave field of the reflected plate.
    """

    def __init__(self, base: Dataset, seed: int = 0):
        self.base = base
        self.generator = torch.Generator().manual_seed(seed)

    def __len__(self) -> int:
        return len(self.base)

    def __getitem__(self, idx: int):
        x, y = self.base[idx]
        code = int(torch.randint(0, 8, (1,), generator=self.generator))
        if code == 0:
            return x, y
        c, r, t = x.shape
        grid = x.reshape(c, 9, 9, t).clone()
        label = y.clone()
        if code & 4:  # mirror about the x = y diagonal
            grid = torch.flip(grid.transpose(1, 2), dims=[0])
            label = label.transpose(0, 1)
        if code & 1:  # mirror about the vertical center line
            grid = torch.flip(grid, dims=[2])
            grid[0] = -grid[0]
            label = torch.flip(label, dims=[1])
        if code & 2:  # mirror about the horizontal center line
            grid = torch.flip(grid, dims=[1])
            grid[1] = -grid[1]
            label = torch.flip(label, dims=[0])
        return grid.reshape(c, r, t).contiguous(), label.contiguous()


@torch.no_grad()
def grid_metrics(model: CrackDetector, dataset: Dataset, config: TrainConfig):
    """Mean IoU / DSC and thresholded accuracy over a dataset."""
    model.eval()
    loader = DataLoader(dataset, batch_size=config.batch_size)
    ious, dscs = [], []
    for x, y in loader:
        probs = model(x.to(config.device))
        pred = (probs > config.t_bin).float()
        truth = (y.to(config.device) > 0.5).float()
        tp = (pred * truth).flatten(1).sum(dim=1)
        fp = (pred * (1 - truth)).flatten(1).sum(dim=1)
        fn = ((1 - pred) * truth).flatten(1).sum(dim=1)
        union = tp + fp + fn
        iou = torch.where(union > 0, tp / union.clamp(min=1), torch.ones_like(tp))
        dsc = torch.where(
            union > 0, 2 * tp / (2 * tp + fp + fn).clamp(min=1), torch.ones_like(tp)
        )
        ious.extend(iou.tolist())
        dscs.extend(dsc.tolist())
    n = len(ious)
    return {
        "iou": sum(ious) / n,
        "dsc": sum(dscs) / n,
        "accuracy": sum(1 for v in ious if v > config.t_tol) / n,
    }


def train(
    model: CrackDetector,
    train_set: Dataset,
    eval_set: Dataset | None,
    config: TrainConfig,
    out_dir: str,
    progress=None,
) -> list[dict]:
    """Optimize the model; returns the per-epoch history.

    Saves `best.pt` (highest evaluation metric) and `history.json` in out_dir.
    The evaluation set defaults to the training set when not provided.
    """
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(config.seed)
    model = model.to(config.device)
    eval_set = eval_set if eval_set is not None else train_set
    if config.augment_flips:
        train_set = MirrorAugmented(train_set, seed=config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    loader = DataLoader(
        train_set, batch_size=config.batch_size, shuffle=True, generator=generator
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    history = []
    best = -1.0
    for epoch in range(config.epochs):
        model.train()
        total = 0.0
        for step, (x, y) in enumerate(loader):
            optimizer.zero_grad()
            probs = model(x.to(config.device))
            loss = focal_loss(probs, y.to(config.device), config.alpha, config.gamma)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, step)
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
        metrics = grid_metrics(model, eval_set, config)
        entry = {"epoch": epoch, "loss": total / len(loader), **metrics}
        history.append(entry)
        logger.info(
            "epoch %d loss %.4f iou %.3f dsc %.3f acc %.3f",
            epoch,
            entry["loss"],
            entry["iou"],
            entry["dsc"],
            entry["accuracy"],
        )
        if progress:
            progress(entry)
        score = metrics[config.checkpoint_metric]
        if score > best:
            best = score
            torch.save(
                {"state_dict": model.state_dict(), "config": asdict(config),
                 "model_kwargs": {"time_steps": model.time_steps}, "epoch": epoch,
                 "metrics": metrics},
                os.path.join(out_dir, "best.pt"),
            )
    with open(os.path.join(out_dir, "history.json"), "w") as fh:
        json.dump(history, fh, indent=2)
    return history


def load_checkpoint(path: str) -> CrackDetector:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = CrackDetector(**payload["model_kwargs"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
