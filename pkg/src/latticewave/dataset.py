"""Deterministic dataset factory: typed sample plans, simulation, files and manifest.

Each sample pairs a simulated receiver record (81 x T x 2, normalized to
[-1, 1]) with binary crack labels at 100x100 and 16x16.  Sample seeds derive
from the master seed and the sample index alone, so generation is reproducible
and order-independent across workers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from .cracks import (
    Crack,
    FloatingComponentError,
    LabelImage,
    apply_crack,
    clip_crack,
    empty_label,
    downsample_label,
    rasterize_label,
    sample_crack,
)
from .dynamics import DivergenceError, LoadSpec, NewmarkParams, simulate
from .mesh import PlateSpec, generate_lattice

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
PARTIAL_MANIFEST_NAME = "manifest.partial.json"


class CorruptSampleError(RuntimeError):
    """A sample file failed its checksum or structural validation."""

    def __init__(self, sample_id: str, reason: str):
        super().__init__(f"sample {sample_id}: {reason}")
        self.sample_id = sample_id


class SampleType(str, Enum):
    N = "N"  # random plate, random crack
    R = "R"  # random plate, no crack
    S = "S"  # different plates, similar cracks
    C = "C"  # same plate, different cracks


@dataclass(frozen=True)
class DatasetConfig:
    master_seed: int
    # plate
    e_x: float = 0.01
    e_y: float = 0.01
    youngs_modulus: float = 5e9
    density: float = 2000.0
    thickness: float = 1.0
    n_particles: int = 10000
    # time stepping / load
    dt: float = 1e-9
    n_steps: int = 2000
    load_magnitude: float = 1000.0
    load_duration_steps: int = 1
    excitation_sites: tuple[str, ...] = ("left", "right", "top")
    # split composition
    train_counts: dict = field(
        default_factory=lambda: {"N": 1368, "R": 76, "S": 76, "C": 1520}
    )
    test_counts: dict = field(
        default_factory=lambda: {"N": 144, "R": 8, "S": 8, "C": 160}
    )
    type_c_group_size: int = 16
    special_pairs: int = 7
    version: int = 1

    @property
    def receiver_spacing(self) -> tuple[float, float]:
        return (self.e_x / 10.0, self.e_y / 10.0)

    def plate_spec(self, seed: int) -> PlateSpec:
        return PlateSpec(
            e_x=self.e_x,
            e_y=self.e_y,
            youngs_modulus=self.youngs_modulus,
            density=self.density,
            thickness=self.thickness,
            n_particles=self.n_particles,
            seed=seed,
        )

    def newmark(self) -> NewmarkParams:
        return NewmarkParams(dt=self.dt, n_steps=self.n_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["excitation_sites"] = list(self.excitation_sites)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        d["excitation_sites"] = tuple(d["excitation_sites"])
        return cls(**d)


def desk_config(master_seed: int = 0, **overrides) -> DatasetConfig:
    """Small configuration for local runs: 64 train / 16 test samples."""
    defaults = dict(
        n_particles=1000,
        n_steps=200,
        train_counts={"N": 29, "R": 2, "S": 1, "C": 32},
        test_counts={"N": 7, "R": 1, "S": 1, "C": 7},
        special_pairs=2,
    )
    defaults.update(overrides)
    return DatasetConfig(master_seed=master_seed, **defaults)


EXCITATION_COORDS = {
    "left": lambda ex, ey: (0.0, 0.5 * ey),
    "right": lambda ex, ey: (ex, 0.5 * ey),
    "top": lambda ex, ey: (0.5 * ex, ey),
}
EXCITATION_DIRS = {
    "left": (1.0, 0.0),
    "right": (-1.0, 0.0),
    "top": (0.0, -1.0),
}


@dataclass
class ReceiverGrid:
    """Interior 9x9 receiver lattice bound to the nearest particles."""

    positions: np.ndarray  # (81, 2)
    spacing: tuple[float, float]
    bindings: np.ndarray  # (81,) particle indices
    offsets: np.ndarray  # (81, 2) receiver - particle


def receiver_grid(config: DatasetConfig, particle_positions: np.ndarray, removed: np.ndarray | None = None) -> ReceiverGrid:
    s_x, s_y = config.receiver_spacing
    ij = np.arange(1, 10)
    gx, gy = np.meshgrid(ij * s_x, ij * s_y, indexing="xy")
    positions = np.column_stack([gx.ravel(), gy.ravel()])
    pos = particle_positions
    idx_map = np.arange(len(pos))
    if removed is not None and removed.any():
        idx_map = idx_map[~removed]
        pos = pos[~removed]
    tree = cKDTree(pos)
    _, nearest = tree.query(positions)
    bindings = idx_map[nearest]
    offsets = positions - particle_positions[bindings]
    return ReceiverGrid(positions=positions, spacing=(s_x, s_y), bindings=bindings, offsets=offsets)


def normalize_record(data: np.ndarray) -> np.ndarray:
    """Affine map of the whole sample onto [-1, 1]; constant records map to zeros."""
    mn, mx = float(data.min()), float(data.max())
    if mx == mn:
        return np.zeros_like(data)
    return 2.0 * (data - mn) / (mx - mn) - 1.0


@dataclass(frozen=True)
class SamplePlan:
    sample_id: str
    split: str
    type: SampleType
    plate_seed: int
    crack_seed: int
    excitation_site: str
    ref_crack: tuple | None = None  # (l, alpha, x, y) base for Type-S jitter
    shared_crack: tuple | None = None  # exact params for special train/test pairs
    special_pair: bool = False


@dataclass
class Sample:
    id: str
    type: SampleType
    plate_seed: int
    crack_seed: int
    crack: Crack | None
    record: np.ndarray  # (81, T, 2) float32, normalized
    label100: LabelImage
    label16: LabelImage
    load: LoadSpec
    excitation_site: str
    receivers: np.ndarray
    receiver_positions: np.ndarray
    dt: float


def _derive_seed(*entropy: int) -> int:
    ss = np.random.SeedSequence(list(entropy))
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


def _split_tag(split: str) -> int:
    return {"train": 1, "test": 2}[split]


def plan_dataset(config: DatasetConfig) -> list[SamplePlan]:
    """Deterministic sample plans for both splits from the master seed alone."""
    plans: list[SamplePlan] = []
    ms = config.master_seed
    s_x, _ = config.receiver_spacing

    # reference cracks shared by Type-S pairs
    def ref_crack(k: int) -> tuple:
        rng = np.random.default_rng(_derive_seed(ms, 900, k))
        c = sample_crack(rng, config.plate_spec(0), *config.receiver_spacing)
        return (c.length, c.angle_deg, c.x, c.y)

    # special train/test crack pairs
    def special_crack(k: int) -> tuple:
        rng = np.random.default_rng(_derive_seed(ms, 700, k))
        c = sample_crack(rng, config.plate_spec(0), *config.receiver_spacing)
        return (c.length, c.angle_deg, c.x, c.y)

    for split, counts in (("train", config.train_counts), ("test", config.test_counts)):
        tag = _split_tag(split)
        idx = 0
        specials = 0
        for tname in ("N", "R", "S", "C"):
            stype = SampleType(tname)
            n = counts.get(tname, 0)
            for k in range(n):
                sid = f"{split}-{idx:05d}"
                if stype is SampleType.C:
                    group = k // config.type_c_group_size
                    plate_seed = _derive_seed(ms, tag, 500, group)
                else:
                    plate_seed = _derive_seed(ms, tag, 100, idx)
                crack_seed = _derive_seed(ms, tag, 200, idx)
                site = config.excitation_sites[
                    int(
                        np.random.default_rng(_derive_seed(ms, tag, 300, idx)).integers(
                            len(config.excitation_sites)
                        )
                    )
                ]
                shared = None
                special = False
                if stype is SampleType.N and specials < config.special_pairs:
                    shared = special_crack(specials)
                    special = True
                    specials += 1
                ref = ref_crack(k // 2) if stype is SampleType.S else None
                plans.append(
                    SamplePlan(
                        sample_id=sid,
                        split=split,
                        type=stype,
                        plate_seed=plate_seed,
                        crack_seed=crack_seed,
                        excitation_site=site,
                        ref_crack=ref,
                        shared_crack=shared,
                        special_pair=special,
                    )
                )
                idx += 1
    return plans


def _plan_crack(
    plan: SamplePlan, config: DatasetConfig, rng: np.random.Generator
) -> Crack | None:
    spec = config.plate_spec(plan.plate_seed)
    s_x, s_y = config.receiver_spacing
    if plan.type is SampleType.R:
        return None
    if plan.shared_crack is not None:
        l, a, x, y = plan.shared_crack
        return Crack(length=l, angle_deg=a, x=x, y=y)
    if plan.type is SampleType.S:
        l, a, x, y = plan.ref_crack
        x = float(np.clip(x + rng.uniform(-0.5 * s_x, 0.5 * s_x), s_x, spec.e_x - s_x))
        y = float(np.clip(y + rng.uniform(-0.5 * s_y, 0.5 * s_y), s_y, spec.e_y - s_y))
        return Crack(length=l, angle_deg=a, x=x, y=y)
    return sample_crack(rng, spec, s_x, s_y)


def generate_sample(plan: SamplePlan, config: DatasetConfig, max_attempts: int = 5) -> Sample:
    """Build one sample; failed attempts retry with a derived crack seed."""
    spec = config.plate_spec(plan.plate_seed)
    model = generate_lattice(spec)
    crack_seed = plan.crack_seed
    last: Exception | None = None
    for attempt in range(max_attempts):
        rng = np.random.default_rng(crack_seed)
        crack = _plan_crack(plan, config, rng)
        try:
            return _simulate_sample(plan, config, model, crack, crack_seed)
        except (FloatingComponentError, DivergenceError) as exc:
            last = exc
            logger.warning(
                "sample %s attempt %d failed (%s); retrying with derived seed",
                plan.sample_id,
                attempt,
                exc,
            )
            crack_seed = _derive_seed(crack_seed, attempt + 1)
    raise RuntimeError(f"sample {plan.sample_id} failed after {max_attempts} attempts: {last}")


def _simulate_sample(
    plan: SamplePlan,
    config: DatasetConfig,
    model,
    crack: Crack | None,
    crack_seed: int,
) -> Sample:
    spec = model.spec
    if crack is not None:
        segment = clip_crack(crack, spec)
        sim_model = apply_crack(model, segment)
        label100 = rasterize_label(segment, spec)
    else:
        sim_model = model
        label100 = empty_label(spec)
    label16 = downsample_label(label100)

    removed = np.array([p.removed for p in sim_model.particles])
    grid = receiver_grid(config, sim_model.positions, removed=removed)

    ex_xy = EXCITATION_COORDS[plan.excitation_site](spec.e_x, spec.e_y)
    pos = sim_model.positions
    alive = np.nonzero(~removed)[0]
    d2 = ((pos[alive] - np.array(ex_xy)) ** 2).sum(axis=1)
    excitation_particle = int(alive[np.argmin(d2)])
    load = LoadSpec(
        excitation_particle=excitation_particle,
        direction=EXCITATION_DIRS[plan.excitation_site],
        magnitude=config.load_magnitude,
        duration_steps=config.load_duration_steps,
    )

    rec = simulate(sim_model, load, config.newmark(), grid.bindings)
    norm = normalize_record(rec.data).astype(np.float32)
    return Sample(
        id=plan.sample_id,
        type=plan.type,
        plate_seed=plan.plate_seed,
        crack_seed=crack_seed,
        crack=crack,
        record=norm,
        label100=label100,
        label16=label16,
        load=load,
        excitation_site=plan.excitation_site,
        receivers=grid.bindings,
        receiver_positions=grid.positions,
        dt=config.dt,
    )


# --- sample container -------------------------------------------------------
#
# "WSMP" little-endian container:
#   magic, u16 version
#   u16 id length + utf-8 id, u8 type char
#   i64 plate_seed, i64 crack_seed
#   u8 has_crack, 4 f64 crack params (length, angle_deg, x, y)
#   u32 excitation particle, 2 f64 direction, f64 magnitude, u32 duration,
#   u16 site length + utf-8 site
#   f64 dt
#   u32 n_receivers, receivers u32[n], receiver positions f64[2n]
#   record tensor: u8 ndim, u32 dims, f32 data
#   label100 / label16: u32 rows, u32 cols, f64 pixel_pitch, u32 nbytes, packed bits

_SAMPLE_MAGIC = b"WSMP"
_SAMPLE_VERSION = 1


def _pack_label(img: LabelImage) -> bytes:
    packed = np.packbits(img.bits.ravel()).tobytes()
    ny, nx = img.bits.shape
    return struct.pack("<IIdI", ny, nx, img.pixel_pitch, len(packed)) + packed


def _unpack_label(data: bytes, off: int) -> tuple[LabelImage, int]:
    ny, nx, pitch, nbytes = struct.unpack_from("<IIdI", data, off)
    off += struct.calcsize("<IIdI")
    bits = np.unpackbits(np.frombuffer(data[off : off + nbytes], dtype=np.uint8))[
        : ny * nx
    ].reshape(ny, nx)
    return LabelImage(bits=bits.astype(np.uint8), pixel_pitch=pitch), off + nbytes


def sample_to_bytes(sample: Sample) -> bytes:
    sid = sample.id.encode()
    site = sample.excitation_site.encode()
    crack = sample.crack
    out = [
        _SAMPLE_MAGIC,
        struct.pack("<H", _SAMPLE_VERSION),
        struct.pack("<H", len(sid)),
        sid,
        sample.type.value.encode(),
        struct.pack("<qq", sample.plate_seed, sample.crack_seed),
        struct.pack(
            "<B4d",
            int(crack is not None),
            *(crack.length, crack.angle_deg, crack.x, crack.y)
            if crack
            else (0.0, 0.0, 0.0, 0.0),
        ),
        struct.pack(
            "<I2ddI",
            sample.load.excitation_particle,
            *sample.load.direction,
            sample.load.magnitude,
            sample.load.duration_steps,
        ),
        struct.pack("<H", len(site)),
        site,
        struct.pack("<d", sample.dt),
        struct.pack("<I", len(sample.receivers)),
        np.asarray(sample.receivers, dtype="<u4").tobytes(),
        np.asarray(sample.receiver_positions, dtype="<f8").tobytes(),
        struct.pack("<B", sample.record.ndim),
        np.asarray(sample.record.shape, dtype="<u4").tobytes(),
        np.ascontiguousarray(sample.record, dtype="<f4").tobytes(),
        _pack_label(sample.label100),
        _pack_label(sample.label16),
    ]
    return b"".join(out)


def sample_from_bytes(data: bytes) -> Sample:
    if data[:4] != _SAMPLE_MAGIC:
        raise ValueError("not a sample container (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<H", data, off)
    off += 2
    if version != _SAMPLE_VERSION:
        raise ValueError(f"unsupported sample version {version}")
    (id_len,) = struct.unpack_from("<H", data, off)
    off += 2
    sid = data[off : off + id_len].decode()
    off += id_len
    stype = SampleType(data[off : off + 1].decode())
    off += 1
    plate_seed, crack_seed = struct.unpack_from("<qq", data, off)
    off += 16
    has_crack, l, a, x, y = struct.unpack_from("<B4d", data, off)
    off += struct.calcsize("<B4d")
    crack = Crack(length=l, angle_deg=a, x=x, y=y) if has_crack else None
    ep, dx, dy, mag, dur = struct.unpack_from("<I2ddI", data, off)
    off += struct.calcsize("<I2ddI")
    (site_len,) = struct.unpack_from("<H", data, off)
    off += 2
    site = data[off : off + site_len].decode()
    off += site_len
    (dt,) = struct.unpack_from("<d", data, off)
    off += 8
    (n_recv,) = struct.unpack_from("<I", data, off)
    off += 4
    receivers = np.frombuffer(data, dtype="<u4", count=n_recv, offset=off).astype(np.intp)
    off += 4 * n_recv
    rpos = np.frombuffer(data, dtype="<f8", count=2 * n_recv, offset=off).reshape(n_recv, 2)
    off += 16 * n_recv
    (ndim,) = struct.unpack_from("<B", data, off)
    off += 1
    dims = np.frombuffer(data, dtype="<u4", count=ndim, offset=off)
    off += 4 * ndim
    count = int(np.prod(dims))
    record = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims)
    off += 4 * count
    label100, off = _unpack_label(data, off)
    label16, off = _unpack_label(data, off)
    return Sample(
        id=sid,
        type=stype,
        plate_seed=plate_seed,
        crack_seed=crack_seed,
        crack=crack,
        record=record,
        label100=label100,
        label16=label16,
        load=LoadSpec(
            excitation_particle=ep, direction=(dx, dy), magnitude=mag, duration_steps=dur
        ),
        excitation_site=site,
        receivers=receivers,
        receiver_positions=rpos,
        dt=dt,
    )


def checksum(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


# --- build / load -----------------------------------------------------------


@dataclass
class DatasetManifest:
    version: int
    master_seed: int
    config: dict
    counts: dict
    samples: list[dict]

    def to_dict(self) -> dict:
        return {
            "format": "latticewave-dataset",
            "version": self.version,
            "master_seed": self.master_seed,
            "config": self.config,
            "counts": self.counts,
            "samples": self.samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("format") != "latticewave-dataset":
            raise ValueError("not a dataset manifest")
        return cls(
            version=d["version"],
            master_seed=d["master_seed"],
            config=d["config"],
            counts=d["counts"],
            samples=d["samples"],
        )

    def validate_counts(self) -> None:
        total = sum(sum(v.values()) for v in self.counts.values())
        if total != len(self.samples):
            raise ValueError("manifest counts do not match sample list")


def _build_one(args) -> dict:
    plan, config_dict, out_dir = args
    config = DatasetConfig.from_dict(config_dict)
    sample = generate_sample(plan, config)
    blob = sample_to_bytes(sample)
    fname = f"{sample.id}.wsmp"
    with open(os.path.join(out_dir, fname), "wb") as fh:
        fh.write(blob)
    crack = sample.crack
    return {
        "id": sample.id,
        "split": plan.split,
        "type": sample.type.value,
        "file": fname,
        "checksum": checksum(blob),
        "plate_seed": sample.plate_seed,
        "crack_seed": sample.crack_seed,
        "excitation_site": sample.excitation_site,
        "special_pair": plan.special_pair,
        "crack": {
            "length": crack.length,
            "angle_deg": crack.angle_deg,
            "x": crack.x,
            "y": crack.y,
        }
        if crack
        else None,
    }


def build_dataset(
    config: DatasetConfig, out_dir: str, workers: int = 1, progress=None
) -> DatasetManifest:
    """Generate all samples and the manifest; resumable via the partial manifest."""
    os.makedirs(out_dir, exist_ok=True)
    plans = plan_dataset(config)

    done: dict[str, dict] = {}
    partial_path = os.path.join(out_dir, PARTIAL_MANIFEST_NAME)
    if os.path.exists(partial_path):
        with open(partial_path) as fh:
            for entry in json.load(fh).get("samples", []):
                path = os.path.join(out_dir, entry["file"])
                if os.path.exists(path):
                    with open(path, "rb") as sf:
                        if checksum(sf.read()) == entry["checksum"]:
                            done[entry["id"]] = entry

    todo = [p for p in plans if p.sample_id not in done]
    entries = dict(done)
    args = [(p, config.to_dict(), out_dir) for p in todo]
    try:
        if workers > 1 and len(todo) > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=workers) as pool:
                for entry in pool.map(_build_one, args):
                    entries[entry["id"]] = entry
                    if progress:
                        progress(len(entries), len(plans))
        else:
            for a in args:
                entry = _build_one(a)
                entries[entry["id"]] = entry
                if progress:
                    progress(len(entries), len(plans))
    except BaseException:
        with open(partial_path, "w") as fh:
            json.dump({"samples": list(entries.values())}, fh, indent=2)
        raise

    ordered = [entries[p.sample_id] for p in plans]
    counts = {s: {t.value: 0 for t in SampleType} for s in ("train", "test")}
    for e in ordered:
        counts[e["split"]][e["type"]] += 1
    manifest = DatasetManifest(
        version=config.version,
        master_seed=config.master_seed,
        config=config.to_dict(),
        counts=counts,
        samples=ordered,
    )
    manifest.validate_counts()
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2)
    if os.path.exists(partial_path):
        os.remove(partial_path)
    return manifest


def read_manifest(manifest_path: str) -> DatasetManifest:
    with open(manifest_path) as fh:
        return DatasetManifest.from_dict(json.load(fh))


def load_dataset(manifest_path: str, split: str | None = None):
    """Stream samples in manifest order, verifying each file checksum."""
    manifest = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    for entry in manifest.samples:
        if split is not None and entry["split"] != split:
            continue
        path = os.path.join(base, entry["file"])
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError as exc:
            raise CorruptSampleError(entry["id"], f"unreadable file: {exc}") from exc
        if checksum(blob) != entry["checksum"]:
            raise CorruptSampleError(entry["id"], "checksum mismatch")
        try:
            sample = sample_from_bytes(blob)
        except (ValueError, struct.error) as exc:
            raise CorruptSampleError(entry["id"], f"malformed container: {exc}") from exc
        yield entry, sample
