"""End-to-end acceptance checks, one printed pass/fail line per criterion."""

import json
import math
import os
import sys
import time

import numpy as np
import pytest
from scipy.sparse import csr_matrix

from latticewave.cli import main as cli_main
from latticewave.cracks import (
    CrackSegment,
    apply_crack,
    clip_crack,
    downsample_label,
    rasterize_label,
    sample_crack,
)
from latticewave.dataset import (
    build_dataset,
    desk_config,
    generate_sample,
    load_dataset,
    plan_dataset,
    sample_to_bytes,
)
from latticewave.dynamics import (
    LoadSpec,
    NewmarkParams,
    WaveFieldState,
    _force_history,
    effective_stiffness,
    first_arrival,
    initial_acceleration,
    newmark_step,
    second_arrival,
    simulate,
    system_energy,
)
from latticewave.mesh import PlateSpec, generate_lattice
from latticewave.metrics import (
    Confusion,
    FocalParams,
    PredictionGrid,
    cross_entropy,
    dsc,
    focal_loss,
    iou,
    save_prediction,
)


def check(name: str, ok: bool, detail: str = "") -> None:
    line = f"{'PASS' if ok else 'FAIL'}: {name}"
    if detail:
        line += f" ({detail})"
    sys.__stdout__.write(line + "\n")
    sys.__stdout__.flush()
    assert ok, line


def sdof_error(n_steps: int) -> float:
    k = (2 * math.pi) ** 2
    dt = 1.0 / n_steps
    K = csr_matrix(np.array([[k]]))
    M = csr_matrix(np.array([[1.0]]))
    params = NewmarkParams(dt=dt, n_steps=n_steps)
    free = np.array([0])
    k_hat = effective_stiffness(K, M, params, free)
    f = np.zeros(1)
    state = WaveFieldState(
        u=np.array([1.0]),
        v=np.zeros(1),
        a=initial_acceleration(K, M, np.array([1.0]), f, free),
    )
    errs = []
    for step in range(1, n_steps + 1):
        state = newmark_step(state, k_hat, M, f, params)
        errs.append(abs(state.u[0] - math.cos(2 * math.pi * step * dt)))
    return max(errs)


def test_newmark_sdof_oracle():
    t0 = time.perf_counter()
    err = sdof_error(1000)
    ratio = err / sdof_error(2000)
    elapsed = time.perf_counter() - t0
    check(
        "Newmark SDOF oracle",
        err < 1e-3 and 3.0 <= ratio <= 5.0 and elapsed < 1.0,
        f"err={err:.2e} ratio={ratio:.2f} t={elapsed:.2f}s",
    )


def test_energy_conservation():
    t0 = time.perf_counter()
    spec = PlateSpec(
        e_x=0.01, e_y=0.01, youngs_modulus=5e9, density=2000.0, n_particles=500, seed=1
    )
    model = generate_lattice(spec)
    params = NewmarkParams(dt=1e-9, n_steps=1)
    load = LoadSpec(
        excitation_particle=250, direction=(1.0, 0.0), magnitude=1e3, duration_steps=3
    )
    free = model.free_dofs
    k_hat = effective_stiffness(model.K, model.M, params, free)
    state = WaveFieldState(
        u=np.zeros(model.ndof),
        v=np.zeros(model.ndof),
        a=initial_acceleration(
            model.K, model.M, np.zeros(model.ndof), _force_history(load, model.ndof, 0), free
        ),
    )
    max_drift = 0.0
    e_prev = None
    for step in range(1, 2001 + load.duration_steps):
        state = newmark_step(state, k_hat, model.M, _force_history(load, model.ndof, step), params)
        if step == load.duration_steps:
            e_prev = system_energy(model, state)
        elif step > load.duration_steps:
            e = system_energy(model, state)
            max_drift = max(max_drift, abs(e - e_prev) / e_prev)
            e_prev = e
    elapsed = time.perf_counter() - t0
    check(
        "Energy conservation after impulse",
        max_drift < 1e-6 and elapsed < 30.0,
        f"max per-step drift={max_drift:.2e} t={elapsed:.1f}s",
    )


def test_matrix_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    ok = True
    detail = ""
    for trial in range(100):
        n = int(rng.integers(30, 120))
        spec = PlateSpec(
            e_x=0.01,
            e_y=0.01 * float(rng.uniform(0.5, 2.0)),
            youngs_modulus=float(rng.uniform(1e9, 50e9)),
            density=float(rng.uniform(500, 5000)),
            n_particles=n,
            seed=int(rng.integers(1 << 31)),
        )
        model = generate_lattice(spec)
        K = model.K
        scale = abs(K).max()
        sym = abs(K - K.T).max() / scale
        tx = np.zeros(model.ndof)
        tx[0::2] = 1.0
        ty = np.zeros(model.ndof)
        ty[1::2] = 1.0
        null = max(np.abs(K @ tx).max(), np.abs(K @ ty).max()) / scale
        diag = model.mass_diag
        attached = np.zeros(model.n_particles, dtype=bool)
        mass_sum = 0.0
        for e in model.elements:
            if e.active and e.area > 0:
                attached[e.node_a] = attached[e.node_b] = True
                mass_sum += spec.density * e.area * e.length
        dofs = np.repeat(attached, 2)
        if not (
            sym <= 1e-12
            and null <= 1e-8
            and np.all(diag[dofs] > 0)
            and abs(diag.sum() / 2 - mass_sum) <= 1e-12 * mass_sum
        ):
            ok = False
            detail = f"trial {trial} sym={sym} null={null:.1e}"
            break
    elapsed = time.perf_counter() - t0
    check(
        "Matrix properties on 100 random meshes",
        ok and elapsed < 30.0,
        detail or f"t={elapsed:.1f}s",
    )


def test_wave_phenomenology():
    t0 = time.perf_counter()
    spec = PlateSpec(
        e_x=0.1, e_y=0.1, youngs_modulus=5e9, density=1000.0, n_particles=5000, seed=0
    )
    model = generate_lattice(spec)
    # vertical crack facing the source, spanning the lower half of the plate
    cracked = apply_crack(model, CrackSegment(0.03, 0.005, 0.03, 0.045))

    def nearest(m, xy):
        pos = m.positions
        idx = np.array([i for i, p in enumerate(m.particles) if not p.removed])
        return int(idx[np.argmin(np.linalg.norm(pos[idx] - np.array(xy), axis=1))])

    shadowed = [(0.025, 0.025), (0.05, 0.025)]
    near = (0.02, 0.025)
    coords = shadowed + [near]
    load = LoadSpec(
        excitation_particle=nearest(model, (0.0, 0.05)),
        direction=(1.0, 0.0),
        magnitude=1000.0,
        duration_steps=10,
    )
    cload = LoadSpec(
        excitation_particle=nearest(cracked, (0.0, 0.05)),
        direction=(1.0, 0.0),
        magnitude=1000.0,
        duration_steps=10,
    )
    params = NewmarkParams(dt=1e-8, n_steps=4000)
    rec_p = simulate(model, load, params, np.array([nearest(model, xy) for xy in coords]))
    rec_c = simulate(cracked, cload, params, np.array([nearest(cracked, xy) for xy in coords]))

    delays = [first_arrival(rec_c, i) - first_arrival(rec_p, i) for i in range(len(shadowed))]
    shadow_ok = all(d > 0 for d in delays)
    t2_p = second_arrival(rec_p, len(shadowed))
    t2_c = second_arrival(rec_c, len(shadowed))
    reflect_ok = t2_p is not None and t2_c is not None and t2_c < t2_p
    elapsed = time.perf_counter() - t0
    check(
        "Wave phenomenology (crack shadow and reflection)",
        shadow_ok and reflect_ok and elapsed < 120.0,
        f"shadow delays={['%.1e' % d for d in delays]} "
        f"second arrival cracked={t2_c} pristine={t2_p} t={elapsed:.1f}s",
    )


def test_metric_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    counts = rng.integers(0, 10**6, size=(100_000, 4))
    counts[0] = (0, 0, 5, 0)  # correct no-crack
    counts[1] = (0, 3, 0, 2)  # no overlap
    counts[2] = (4, 0, 0, 0)  # exact match
    identity_ok = True
    for tp, fp, tn, fn in counts:
        c = Confusion(int(tp), int(fp), int(tn), int(fn))
        i = iou(c)
        if abs(dsc(c) - 2 * i / (1 + i)) > 1e-12:
            identity_ok = False
            break
    edge_ok = (
        iou(Confusion(0, 0, 5, 0)) == 1.0
        and dsc(Confusion(0, 0, 5, 0)) == 1.0
        and iou(Confusion(0, 3, 0, 2)) == 0.0
        and dsc(Confusion(0, 3, 0, 2)) == 0.0
        and iou(Confusion(4, 0, 0, 0)) == 1.0
        and dsc(Confusion(4, 0, 0, 0)) == 1.0
    )
    focal_ok = True
    for _ in range(50):
        p = rng.random((4, 16, 16))
        y = (rng.random((4, 16, 16)) < 0.1).astype(float)
        fl = focal_loss(p, y, FocalParams(alpha=0.5, gamma=0.0))
        ce = cross_entropy(p, y)
        if not math.isclose(fl, 0.5 * ce, rel_tol=1e-12, abs_tol=1e-12):
            focal_ok = False
            break
    elapsed = time.perf_counter() - t0
    check(
        "Metric identities",
        identity_ok and edge_ok and focal_ok and elapsed < 5.0,
        f"t={elapsed:.1f}s",
    )


def test_worked_loss_value():
    loss = focal_loss(
        np.array([[0.5]]), np.array([[1.0]]), FocalParams(alpha=0.25, gamma=2.0)
    )
    expected = 0.25 * 0.25 * math.log(2.0)
    check(
        "Worked focal loss value",
        abs(loss - expected) < 1e-9,
        f"loss={loss:.9f} expected={expected:.9f}",
    )


@pytest.fixture(scope="module")
def desk_dataset(tmp_path_factory):
    config = desk_config(master_seed=123)
    out = str(tmp_path_factory.mktemp("accept") / "ds")
    manifest = build_dataset(config, out, workers=8)
    return config, out, manifest


def test_dataset_determinism_and_round_trip(desk_dataset, tmp_path):
    t0 = time.perf_counter()
    config, out, manifest = desk_dataset
    again = build_dataset(config, str(tmp_path / "again"), workers=8)
    checks_equal = [e["checksum"] for e in manifest.samples] == [
        e["checksum"] for e in again.samples
    ]
    plans = {p.sample_id: p for p in plan_dataset(config)}
    round_trip_ok = True
    for i, (entry, sample) in enumerate(load_dataset(os.path.join(out, "manifest.json"))):
        if i % 20 == 0:
            fresh = generate_sample(plans[entry["id"]], config)
            if sample_to_bytes(fresh) != sample_to_bytes(sample):
                round_trip_ok = False
                break
        if sample.record.dtype != np.float32 or sample.record.shape != (
            81,
            config.n_steps,
            2,
        ):
            round_trip_ok = False
            break
    elapsed = time.perf_counter() - t0
    check(
        "Dataset determinism and round-trip",
        checks_equal and round_trip_ok and elapsed < 600.0,
        f"{len(manifest.samples)} samples t={elapsed:.1f}s",
    )


def oracle_cells(p0, p1, nx, ny, eps=1e-9):
    x0, y0 = p0
    x1, y1 = p1
    dx, dy = x1 - x0, y1 - y0
    ix = np.arange(nx)[None, :]
    iy = np.arange(ny)[:, None]
    tmin = np.zeros((ny, nx))
    tmax = np.ones((ny, nx))
    ok = np.ones((ny, nx), dtype=bool)
    for p, d, lo, hi in ((x0, dx, ix, ix + 1), (y0, dy, iy, iy + 1)):
        lo = np.broadcast_to(lo, (ny, nx)).astype(float)
        hi = np.broadcast_to(hi, (ny, nx)).astype(float)
        if d == 0.0:
            ok &= (p >= lo - eps) & (p <= hi + eps)
        else:
            ta = (lo - p) / d
            tb = (hi - p) / d
            tmin = np.maximum(tmin, np.minimum(ta, tb))
            tmax = np.minimum(tmax, np.maximum(ta, tb))
    hit = ok & (tmin <= tmax + eps)
    bits = np.zeros((ny, nx), dtype=np.uint8)
    bits[hit] = 1
    return bits


def test_crack_pipeline_oracle():
    t0 = time.perf_counter()
    spec = PlateSpec(
        e_x=0.01, e_y=0.01, youngs_modulus=5e9, density=2000.0, n_particles=100, seed=0
    )
    rng = np.random.default_rng(17)
    overlap = np.zeros((16, 100), dtype=bool)
    for j in range(16):
        for i in range(100):
            overlap[j, i] = min((j + 1) / 16, (i + 1) / 100) > max(j / 16, i / 100)
    raster_ok = True
    down_ok = True
    for _ in range(1000):
        seg = clip_crack(sample_crack(rng, spec, 0.001, 0.001), spec)
        img = rasterize_label(seg, spec)
        sx, sy = spec.e_x / 100, spec.e_y / 100
        expected = oracle_cells((seg.x0 / sx, seg.y0 / sy), (seg.x1 / sx, seg.y1 / sy), 100, 100)
        if not np.array_equal(img.bits, expected):
            raster_ok = False
            break
        small = downsample_label(img)
        # any-hit oracle: a 16-cell is lit iff a lit pixel overlaps it on both axes
        expect16 = (overlap @ img.bits.astype(bool) @ overlap.T).astype(np.uint8)
        if not np.array_equal(small.bits, expect16) or (
            img.lit_count() > 0 and small.lit_count() == 0
        ):
            down_ok = False
            break
    elapsed = time.perf_counter() - t0
    check(
        "Crack pipeline oracle (1000 cracks)",
        raster_ok and down_ok and elapsed < 30.0,
        f"t={elapsed:.1f}s",
    )


def test_cmd_eval_oracles(desk_dataset, tmp_path):
    config, out, manifest = desk_dataset
    manifest_path = os.path.join(out, "manifest.json")
    perfect = tmp_path / "perfect"
    zero = tmp_path / "zero"
    perfect.mkdir()
    zero.mkdir()
    types = []
    for entry, sample in load_dataset(manifest_path, split="test"):
        types.append(entry["type"])
        save_prediction(
            PredictionGrid(probs=sample.label16.bits.astype(float), sample_id=entry["id"]),
            str(perfect / f"{entry['id']}.wprd"),
        )
        save_prediction(
            PredictionGrid(probs=np.zeros((16, 16)), sample_id=entry["id"]),
            str(zero / f"{entry['id']}.wprd"),
        )

    code_p = cli_main(
        ["eval", "--predictions", str(perfect), "--manifest", manifest_path,
         "--out", str(tmp_path / "ep")]
    )
    sp = json.load(open(tmp_path / "ep" / "summary.json"))
    perfect_ok = code_p == 0 and all(
        sp[k] == 1.0 for k in ("precision", "recall", "mean_iou", "mean_dsc", "accuracy")
    )

    code_z = cli_main(
        ["eval", "--predictions", str(zero), "--manifest", manifest_path,
         "--out", str(tmp_path / "ez")]
    )
    sz = json.load(open(tmp_path / "ez" / "summary.json"))
    r_fraction = types.count("R") / len(types)
    zero_ok = code_z == 0 and sz["accuracy"] == pytest.approx(r_fraction)
    check(
        "cmd_eval oracles",
        perfect_ok and zero_ok,
        f"perfect accuracy={sp['accuracy']} zero accuracy={sz['accuracy']} "
        f"Type-R fraction={r_fraction}",
    )
