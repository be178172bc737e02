"""Command-line front end: run simulations, build datasets, score predictions.

Subcommands:
  simulate     one scenario, optional frame rendering and cracked-twin comparison
  gen-dataset  build a full train/test dataset from a YAML config
  eval         score a directory of prediction grids against a dataset manifest

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np
import yaml

from .cracks import Crack, FloatingComponentError, apply_crack, clip_crack
from .dataset import (
    EXCITATION_COORDS,
    EXCITATION_DIRS,
    CorruptSampleError,
    DatasetConfig,
    build_dataset,
    load_dataset,
    read_manifest,
    receiver_grid,
)
from .dynamics import (
    AssemblyDefectError,
    DivergenceError,
    LoadSpec,
    NewmarkParams,
    SingularSystemError,
    first_arrival,
    save_record,
    simulate,
)
from .mesh import MeshGenerationError, PlateSpec, generate_lattice
from .metrics import (
    adjusted_accuracy,
    evaluate,
    histogram_table,
    iou_histograms,
    load_prediction,
    report_table,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Configuration file is missing, malformed, or inconsistent."""


def _check_keys(section: dict, allowed: set, context: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if cfg.get("version") != CONFIG_VERSION:
        raise ConfigError(f"{path}: expected 'version: {CONFIG_VERSION}'")
    return cfg


_PLATE_KEYS = {
    "e_x",
    "e_y",
    "youngs_modulus",
    "density",
    "thickness",
    "n_particles",
    "seed",
    "jitter",
}
_LOAD_KEYS = {"site", "magnitude", "duration_steps"}
_NEWMARK_KEYS = {"dt", "n_steps"}
_CRACK_KEYS = {"length", "angle_deg", "x", "y"}


def _simulate_config(cfg: dict, seed_override: int | None):
    _check_keys(cfg, {"version", "plate", "load", "newmark", "crack"}, "simulate config")
    for key in ("plate", "load", "newmark"):
        if key not in cfg:
            raise ConfigError(f"simulate config: missing section '{key}'")
    _check_keys(cfg["plate"], _PLATE_KEYS, "plate")
    _check_keys(cfg["load"], _LOAD_KEYS, "load")
    _check_keys(cfg["newmark"], _NEWMARK_KEYS, "newmark")
    plate = dict(cfg["plate"])
    if seed_override is not None:
        plate["seed"] = seed_override
    try:
        spec = PlateSpec(**plate)
        spec.validate()
        params = NewmarkParams(**cfg["newmark"])
        params.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"simulate config: {exc}") from exc
    site = cfg["load"].get("site", "left")
    if site not in EXCITATION_COORDS:
        raise ConfigError(f"load.site must be one of {sorted(EXCITATION_COORDS)}")
    crack = None
    if "crack" in cfg:
        _check_keys(cfg["crack"], _CRACK_KEYS, "crack")
        try:
            crack = Crack(**cfg["crack"])
        except TypeError as exc:
            raise ConfigError(f"crack: {exc}") from exc
    return spec, site, cfg["load"], params, crack


def _render_frame(path: str, positions: np.ndarray, values: np.ndarray, spec, px=200):
    """Nearest-particle rasterization of a scalar field, per-frame grayscale."""
    from PIL import Image
    from scipy.spatial import cKDTree

    xs = (np.arange(px) + 0.5) * spec.e_x / px
    ys = (np.arange(px) + 0.5) * spec.e_y / px
    gx, gy = np.meshgrid(xs, ys)
    tree = cKDTree(positions)
    _, idx = tree.query(np.column_stack([gx.ravel(), gy.ravel()]))
    img = values[idx].reshape(px, px)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    # image rows run top-down; plate y runs bottom-up
    Image.fromarray((scaled[::-1] * 255).astype(np.uint8), mode="L").save(path)


def _run_scenario(model, site, load_cfg, params, receivers, snapshot_every):
    pos = model.positions
    removed = np.array([p.removed for p in model.particles])
    alive = np.nonzero(~removed)[0]
    xy = EXCITATION_COORDS[site](model.spec.e_x, model.spec.e_y)
    particle = int(alive[np.argmin(((pos[alive] - np.array(xy)) ** 2).sum(axis=1))])
    load = LoadSpec(
        excitation_particle=particle,
        direction=EXCITATION_DIRS[site],
        magnitude=float(load_cfg.get("magnitude", 1000.0)),
        duration_steps=int(load_cfg.get("duration_steps", 1)),
    )
    return simulate(model, load, params, receivers, snapshot_every=snapshot_every)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    spec, site, load_cfg, params, crack = _simulate_config(cfg, args.seed)
    if args.with_crack and crack is None:
        raise ConfigError("--with-crack requires a 'crack' section in the config")
    os.makedirs(args.out, exist_ok=True)

    model = generate_lattice(spec)
    ds_like = DatasetConfig(
        master_seed=0, e_x=spec.e_x, e_y=spec.e_y, n_particles=spec.n_particles
    )
    grid = receiver_grid(ds_like, model.positions)
    snapshot_every = args.frames if args.frames else None

    rec = _run_scenario(model, site, load_cfg, params, grid.bindings, snapshot_every)
    save_record(rec, os.path.join(args.out, "pristine.f32"))
    if snapshot_every:
        for k, step in enumerate(rec.snapshot_steps):
            mag = np.linalg.norm(rec.snapshots[k], axis=1)
            _render_frame(
                os.path.join(args.out, f"frame_{step:05d}.png"),
                model.positions,
                mag,
                spec,
            )

    if args.with_crack:
        segment = clip_crack(crack, spec)
        cracked = apply_crack(model, segment)
        removed = np.array([p.removed for p in cracked.particles])
        cgrid = receiver_grid(ds_like, cracked.positions, removed=removed)
        crec = _run_scenario(cracked, site, load_cfg, params, cgrid.bindings, snapshot_every)
        save_record(crec, os.path.join(args.out, "cracked.f32"))
        if snapshot_every:
            for k, step in enumerate(crec.snapshot_steps):
                mag = np.linalg.norm(crec.snapshots[k], axis=1)
                _render_frame(
                    os.path.join(args.out, f"frame_crack_{step:05d}.png"),
                    cracked.positions,
                    mag,
                    spec,
                )
        table = arrival_table(rec, crec, grid.positions)
        with open(os.path.join(args.out, "arrivals.txt"), "w") as fh:
            fh.write(table)
        print(table)
    return EXIT_OK


def arrival_table(rec, crec, positions) -> str:
    """Per-receiver first-arrival comparison between pristine and cracked runs."""
    lines = [
        f"{'receiver':>8} {'x':>9} {'y':>9} {'pristine':>12} {'cracked':>12} {'delay':>12}"
    ]
    for r in range(len(positions)):
        t0 = first_arrival(rec, r)
        t1 = first_arrival(crec, r)
        f = lambda t: f"{t:.4e}" if t is not None else "-"
        d = f"{t1 - t0:+.4e}" if (t0 is not None and t1 is not None) else "-"
        lines.append(
            f"{r:>8} {positions[r, 0]:9.4f} {positions[r, 1]:9.4f} "
            f"{f(t0):>12} {f(t1):>12} {d:>12}"
        )
    return "\n".join(lines)


_DATASET_KEYS = {
    "master_seed",
    "e_x",
    "e_y",
    "youngs_modulus",
    "density",
    "thickness",
    "n_particles",
    "dt",
    "n_steps",
    "load_magnitude",
    "load_duration_steps",
    "excitation_sites",
    "train_counts",
    "test_counts",
    "type_c_group_size",
    "special_pairs",
}


def cmd_gen_dataset(args) -> int:
    cfg = load_config(args.config)
    body = {k: v for k, v in cfg.items() if k != "version"}
    _check_keys(body, _DATASET_KEYS, "dataset config")
    if args.seed is not None:
        body["master_seed"] = args.seed
    if "master_seed" not in body:
        raise ConfigError("dataset config: master_seed required (or pass --seed)")
    if "excitation_sites" in body:
        body["excitation_sites"] = tuple(body["excitation_sites"])
    try:
        config = DatasetConfig(**body)
    except TypeError as exc:
        raise ConfigError(f"dataset config: {exc}") from exc

    def progress(done, total):
        print(f"\r{done}/{total} samples", end="", file=sys.stderr, flush=True)

    manifest = build_dataset(config, args.out, workers=args.workers, progress=progress)
    print(file=sys.stderr)
    print(f"wrote {len(manifest.samples)} samples to {args.out}")
    return EXIT_OK


def _mosaic(grids: list[np.ndarray], path: str, cols: int = 16, cell: int = 16, pad: int = 2):
    """Tile per-sample grids into one grayscale sheet (values in [0, 1])."""
    from PIL import Image

    rows = math.ceil(len(grids) / cols)
    h = rows * (cell + pad) + pad
    w = cols * (cell + pad) + pad
    sheet = np.full((h, w), 64, dtype=np.uint8)
    for i, g in enumerate(grids):
        r, c = divmod(i, cols)
        y0 = pad + r * (cell + pad)
        x0 = pad + c * (cell + pad)
        sheet[y0 : y0 + cell, x0 : x0 + cell] = (np.asarray(g)[::-1] * 255).astype(
            np.uint8
        )
    Image.fromarray(sheet, mode="L").save(path)


def cmd_eval(args) -> int:
    manifest = read_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    grids, labels16, labels100, types = [], [], [], []
    for entry, sample in load_dataset(args.manifest, split="test"):
        pred_path = os.path.join(args.predictions, f"{entry['id']}.wprd")
        if not os.path.exists(pred_path):
            raise CorruptSampleError(entry["id"], "no prediction grid found")
        grid = load_prediction(pred_path)
        if grid.sample_id != entry["id"]:
            raise CorruptSampleError(
                entry["id"], f"prediction file names sample {grid.sample_id!r}"
            )
        grids.append(grid)
        labels16.append(sample.label16.bits)
        labels100.append(sample.label100.bits)
        types.append(entry["type"])

    report = evaluate(
        grids,
        labels16,
        t_bin=args.t_bin,
        t_tol=args.t_tol,
        labels100=labels100,
        sample_types=types,
    )
    table = report_table([(args.alpha, args.gamma, report)])
    hists = iou_histograms(grids, labels16, [args.t_bin])
    curve = adjusted_accuracy(report.samples, [0.0, 0.001, 0.002, 0.003, 0.004], args.t_tol)

    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(table + "\n")
    with open(os.path.join(args.out, "histograms.txt"), "w") as fh:
        fh.write(histogram_table(hists) + "\n")
    with open(os.path.join(args.out, "adjusted_accuracy.txt"), "w") as fh:
        fh.write(f"{'cutoff':>8} {'accuracy':>9} {'samples':>8}\n")
        for cutoff, acc, n in curve:
            acc_s = f"{acc:9.3f}" if acc is not None else "        -"
            fh.write(f"{cutoff:8.4f} {acc_s} {n:8d}\n")
    summary = {
        "t_bin": args.t_bin,
        "t_tol": args.t_tol,
        "precision": report.precision(),
        "recall": report.recall(),
        "mean_iou": report.mean_iou,
        "mean_dsc": report.mean_dsc,
        "accuracy": report.accuracy,
        "n_samples": len(report.samples),
    }
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    _mosaic([g.probs for g in grids], os.path.join(args.out, "mosaic_probs.png"))
    _mosaic(
        [(g.probs > args.t_bin).astype(float) for g in grids],
        os.path.join(args.out, "mosaic_binary.png"),
    )
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latticewave",
        description="Lattice wave simulation, dataset generation, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run one wave-propagation scenario")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out", default="out")
    p_sim.add_argument("--frames", type=int, default=0, metavar="N",
                       help="write a full-field frame image every N steps")
    p_sim.add_argument("--with-crack", action="store_true",
                       help="also run the cracked twin and compare arrivals")
    p_sim.set_defaults(func=cmd_simulate)

    p_gen = sub.add_parser("gen-dataset", help="build a train/test dataset")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--out", default="dataset")
    p_gen.add_argument("--workers", type=int, default=1)
    p_gen.set_defaults(func=cmd_gen_dataset)

    p_eval = sub.add_parser("eval", help="score prediction grids against a manifest")
    p_eval.add_argument("--predictions", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--out", default="eval")
    p_eval.add_argument("--t-bin", type=float, default=0.5)
    p_eval.add_argument("--t-tol", type=float, default=0.5)
    p_eval.add_argument("--alpha", type=float, default=0.5,
                        help="loss alpha used to label the report row")
    p_eval.add_argument("--gamma", type=float, default=0.0,
                        help="loss gamma used to label the report row")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        DivergenceError,
        SingularSystemError,
        AssemblyDefectError,
        FloatingComponentError,
        MeshGenerationError,
    ) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, CorruptSampleError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
