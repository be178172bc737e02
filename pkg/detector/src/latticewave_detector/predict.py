"""Export per-sample probability grids in the shared prediction-file format."""

from __future__ import annotations

import os
import struct

import numpy as np
import torch
from torch.utils.data import DataLoader

from .data import WaveFieldDataset
from .model import CrackDetector

_PRED_MAGIC = b"WPRD"
_PRED_VERSION = 1


def write_prediction(probs: np.ndarray, sample_id: str, path: str) -> None:
    ny, nx = probs.shape
    sid = sample_id.encode()
    with open(path, "wb") as fh:
        fh.write(_PRED_MAGIC)
        fh.write(struct.pack("<HH", _PRED_VERSION, len(sid)))
        fh.write(sid)
        fh.write(struct.pack("<HH", ny, nx))
        fh.write(np.ascontiguousarray(probs, dtype="<f4").tobytes())


@torch.no_grad()
def predict_export(
    model: CrackDetector,
    dataset: WaveFieldDataset,
    out_dir: str,
    batch_size: int = 16,
    device: str = "cpu",
) -> list[str]:
    """Run inference over a dataset split and write one grid file per sample."""
    os.makedirs(out_dir, exist_ok=True)
    model = model.to(device).eval()
    loader = DataLoader(dataset, batch_size=batch_size)
    ids = dataset.sample_ids
    paths = []
    i = 0
    for x, _ in loader:
        probs = model(x.to(device)).cpu().numpy()
        for grid in probs:
            path = os.path.join(out_dir, f"{ids[i]}.wprd")
            write_prediction(grid, ids[i], path)
            paths.append(path)
            i += 1
    if i != len(ids):
        raise RuntimeError(f"expected tensors for {len(ids)} samples, saw {i}")
    return paths
