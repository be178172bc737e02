"""Readers for the dataset file contract: JSON manifest plus sample blobs.

Only the fields the trainer needs are materialized: sample id, type, the
normalized receiver record (R, T, 2) and the 16x16 / 100x100 binary labels.
Checksums from the manifest are verified before parsing.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch.utils.data import Dataset

_SAMPLE_MAGIC = b"WSMP"
_SAMPLE_VERSION = 1


class DatasetFormatError(RuntimeError):
    pass


@dataclass
class SampleTensors:
    sample_id: str
    sample_type: str
    record: np.ndarray  # (R, T, 2) float32
    label16: np.ndarray  # (16, 16) uint8
    label100: np.ndarray  # (100, 100) uint8


def _read_label(data: bytes, off: int):
    ny, nx, _pitch, nbytes = struct.unpack_from("<IIdI", data, off)
    off += struct.calcsize("<IIdI")
    bits = np.unpackbits(np.frombuffer(data[off : off + nbytes], dtype=np.uint8))
    return bits[: ny * nx].reshape(ny, nx).astype(np.uint8), off + nbytes


def parse_sample(data: bytes) -> SampleTensors:
    if data[:4] != _SAMPLE_MAGIC:
        raise DatasetFormatError("bad sample magic")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != _SAMPLE_VERSION:
        raise DatasetFormatError(f"unsupported sample version {version}")
    off = 6
    (id_len,) = struct.unpack_from("<H", data, off)
    off += 2
    sid = data[off : off + id_len].decode()
    off += id_len
    stype = data[off : off + 1].decode()
    off += 1
    off += 16  # seeds
    off += struct.calcsize("<B4d")  # crack flag + parameters
    off += struct.calcsize("<I2ddI")  # load
    (site_len,) = struct.unpack_from("<H", data, off)
    off += 2 + site_len
    off += 8  # dt
    (n_recv,) = struct.unpack_from("<I", data, off)
    off += 4 + 4 * n_recv + 16 * n_recv  # receiver ids + positions
    (ndim,) = struct.unpack_from("<B", data, off)
    off += 1
    dims = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    count = int(np.prod(dims))
    record = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims)
    off += 4 * count
    label100, off = _read_label(data, off)
    label16, off = _read_label(data, off)
    return SampleTensors(
        sample_id=sid,
        sample_type=stype,
        record=record,
        label16=label16,
        label100=label100,
    )


def _checksum(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def load_split(manifest_path: str, split: str) -> list[SampleTensors]:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "latticewave-dataset":
        raise DatasetFormatError(f"{manifest_path}: not a dataset manifest")
    base = os.path.dirname(os.path.abspath(manifest_path))
    out = []
    for entry in manifest["samples"]:
        if entry["split"] != split:
            continue
        with open(os.path.join(base, entry["file"]), "rb") as fh:
            blob = fh.read()
        if _checksum(blob) != entry["checksum"]:
            raise DatasetFormatError(f"sample {entry['id']}: checksum mismatch")
        out.append(parse_sample(blob))
    return out


class WaveFieldDataset(Dataset):
    """In-memory torch dataset over one split of a manifest.

    Items are (input, label) pairs with input (2, R, T) float32 and label
    (16, 16) float32.
    """

    def __init__(self, manifest_path: str, split: str):
        self.samples = load_split(manifest_path, split)
        if not self.samples:
            raise DatasetFormatError(f"split {split!r} is empty")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    @property
    def time_steps(self) -> int:
        return self.samples[0].record.shape[1]

    @property
    def n_receivers(self) -> int:
        return self.samples[0].record.shape[0]

    def __getitem__(self, i: int):
        s = self.samples[i]
        x = torch.from_numpy(np.ascontiguousarray(s.record.transpose(2, 0, 1)))
        y = torch.from_numpy(s.label16.astype(np.float32))
        return x, y
