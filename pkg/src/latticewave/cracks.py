"""Parametric line cracks: sampling, clipping, lattice application, label rasterization.

A crack is a line segment defined by length, orientation (degrees CCW from +x)
and an interior start point.  Applying a crack removes every particle whose
Voronoi cell the segment touches and deactivates their incident elements.
Ground-truth labels are the supercover rasterization of the segment on a
100x100 pixel grid, reduced to 16x16 by an any-hit area map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from shapely.geometry import LineString, Point, Polygon
from shapely.strtree import STRtree

from .mesh import LatticeModel, PlateSpec, ensure_cell_geometry


class FloatingComponentError(RuntimeError):
    """A crack disconnected a multi-particle region from every fixed support."""


@dataclass(frozen=True)
class Crack:
    """Line defect: length (m), orientation (degrees CCW from +x), start point (m)."""

    length: float
    angle_deg: float
    x: float
    y: float

    def validate(self, spec: PlateSpec, s_x: float, s_y: float) -> None:
        if not 0 < self.length <= 0.5 * min(spec.e_x, spec.e_y):
            raise ValueError("crack length out of range")
        if not 0 <= self.angle_deg <= 360:
            raise ValueError("crack orientation out of range")
        if not (s_x <= self.x <= spec.e_x - s_x and s_y <= self.y <= spec.e_y - s_y):
            raise ValueError("crack start outside the allowed interior band")


@dataclass(frozen=True)
class CrackSegment:
    """Crack clipped to the plate: two endpoints inside the rectangle."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def p0(self) -> tuple[float, float]:
        return (self.x0, self.y0)

    @property
    def p1(self) -> tuple[float, float]:
        return (self.x1, self.y1)

    @property
    def length(self) -> float:
        return math.hypot(self.x1 - self.x0, self.y1 - self.y0)


@dataclass
class LabelImage:
    """Binary crack-occupancy grid; bits[iy, ix], row 0 at the plate bottom."""

    bits: np.ndarray
    pixel_pitch: float

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.bits.shape[1], self.bits.shape[0])

    def lit_count(self) -> int:
        return int(self.bits.sum())


def sample_crack(
    rng: np.random.Generator, spec: PlateSpec, s_x: float, s_y: float
) -> Crack:
    """Uniform draw of the crack parameters within their documented ranges."""
    if not (s_x < spec.e_x / 2 and s_y < spec.e_y / 2):
        raise ValueError("receiver spacing must leave an interior band")
    length = rng.uniform(0.0, 0.5 * min(spec.e_x, spec.e_y))
    angle = rng.uniform(0.0, 360.0)
    x = rng.uniform(s_x, spec.e_x - s_x)
    y = rng.uniform(s_y, spec.e_y - s_y)
    if length == 0.0:  # open interval (0, l_max]
        length = 0.5 * min(spec.e_x, spec.e_y)
    return Crack(length=length, angle_deg=angle, x=x, y=y)


def clip_crack(crack: Crack, spec: PlateSpec) -> CrackSegment:
    """Intersect the crack segment with the plate rectangle; excess is discarded."""
    rad = math.radians(crack.angle_deg)
    x1 = crack.x + crack.length * math.cos(rad)
    y1 = crack.y + crack.length * math.sin(rad)
    # Liang-Barsky clip of [p0, p1] against [0,e_x]x[0,e_y]; p0 is interior
    dx, dy = x1 - crack.x, y1 - crack.y
    t1 = 1.0
    for p, q in (
        (-dx, crack.x - 0.0),
        (dx, spec.e_x - crack.x),
        (-dy, crack.y - 0.0),
        (dy, spec.e_y - crack.y),
    ):
        if p > 0:
            t1 = min(t1, q / p)
    t1 = max(t1, 0.0)
    return CrackSegment(crack.x, crack.y, crack.x + t1 * dx, crack.y + t1 * dy)


def crossed_particles(model: LatticeModel, segment: CrackSegment) -> list[int]:
    """Indices of particles whose (clipped) Voronoi cell the segment touches."""
    polygons = ensure_cell_geometry(model)
    geom = (
        Point(segment.p0)
        if segment.length == 0.0
        else LineString([segment.p0, segment.p1])
    )
    # prefilter by distance from site to segment
    pos = model.positions
    max_area = max(p.cell_area for p in model.particles)
    radius = 2.5 * math.sqrt(max_area)
    d = np.array([geom.distance(Point(xy)) for xy in pos]) if len(pos) < 512 else None
    if d is None:
        tree = STRtree([Polygon(poly) for poly in polygons])
        candidates = sorted(tree.query(geom.buffer(radius)))
    else:
        candidates = np.nonzero(d <= radius)[0]
    hits = []
    for i in candidates:
        if model.particles[i].removed:
            continue
        if Polygon(polygons[i]).intersects(geom):
            hits.append(int(i))
    if segment.length == 0.0:
        return hits[:1]  # degenerate point: remove a single particle
    return hits


def apply_crack(model: LatticeModel, segment: CrackSegment) -> LatticeModel:
    """Copy of the model with crack particles removed and matrices reassembled."""
    import copy

    hits = crossed_particles(model, segment)
    new = copy.deepcopy(model)
    for i in hits:
        new.particles[i].removed = True
    for e in new.elements:
        if new.particles[e.node_a].removed or new.particles[e.node_b].removed:
            e.active = False
    _check_connectivity(new)
    new.reassemble()
    return new


def _check_connectivity(model: LatticeModel) -> None:
    """Every multi-particle component of the cracked mesh must reach a fixed support."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    n = model.n_particles
    removed = np.array([p.removed for p in model.particles], dtype=bool)
    rows, cols = [], []
    for e in model.elements:
        # only elements with positive cross-section transmit force
        if e.active and e.area > 0 and not removed[e.node_a] and not removed[e.node_b]:
            rows.append(e.node_a)
            cols.append(e.node_b)
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    n_comp, labels = connected_components(adj, directed=False)
    fixed_particles = {d // 2 for d in model.fixed_dofs}
    for comp in range(n_comp):
        members = np.nonzero((labels == comp) & ~removed)[0]
        if len(members) <= 1:
            continue  # isolated particles are excluded from the free set instead
        if not any(int(i) in fixed_particles for i in members):
            raise FloatingComponentError(
                f"component of {len(members)} particles has no fixed support"
            )


# --- rasterization ----------------------------------------------------------


def _grid_crossings(a: float, b: float, n: int) -> np.ndarray:
    """Integers strictly between a and b (inclusive bounds handled by endpoints)."""
    lo, hi = min(a, b), max(a, b)
    start = math.floor(lo) + 1
    stop = math.ceil(hi) - 1
    if stop < start:
        return np.empty(0, dtype=float)
    return np.arange(start, stop + 1, dtype=float)


def _touched_indices(value: float, n: int, eps: float = 1e-9) -> list[int]:
    """Grid cells along one axis whose closed interval contains `value`."""
    nearest = round(value)
    if abs(value - nearest) < eps:  # on a grid line: both neighbors touched
        cells = [int(nearest) - 1, int(nearest)]
    else:
        cells = [math.floor(value)]
    return [c for c in cells if 0 <= c < n]


def supercover_cells(
    p0: tuple[float, float], p1: tuple[float, float], nx: int, ny: int
) -> set[tuple[int, int]]:
    """All grid cells whose closed unit square the segment touches.

    Coordinates are in grid units (cell size 1, domain [0,nx]x[0,ny]).  The
    traversal collects the crossing parameters of every grid line, marks the
    cell containing each span midpoint, and marks all cells adjacent to each
    crossing point (which yields the supercover at corners and along lines).
    """
    x0, y0 = p0
    x1, y1 = p1
    dx, dy = x1 - x0, y1 - y0
    ts = [0.0, 1.0]
    if dx != 0.0:
        ts.extend((xi - x0) / dx for xi in _grid_crossings(x0, x1, nx))
    if dy != 0.0:
        ts.extend((yi - y0) / dy for yi in _grid_crossings(y0, y1, ny))
    ts = sorted(t for t in ts if 0.0 <= t <= 1.0)

    cells: set[tuple[int, int]] = set()
    for t in ts:
        px, py = x0 + t * dx, y0 + t * dy
        for ix in _touched_indices(px, nx):
            for iy in _touched_indices(py, ny):
                cells.add((ix, iy))
    for ta, tb in zip(ts[:-1], ts[1:]):
        tm = 0.5 * (ta + tb)
        px, py = x0 + tm * dx, y0 + tm * dy
        ix = min(max(math.floor(px), 0), nx - 1)
        iy = min(max(math.floor(py), 0), ny - 1)
        cells.add((ix, iy))
    return cells


def rasterize_label(
    segment: CrackSegment, spec: PlateSpec, resolution: tuple[int, int] = (100, 100)
) -> LabelImage:
    """Supercover rasterization of the crack segment on the plate pixel grid."""
    nx, ny = resolution
    sx, sy = spec.e_x / nx, spec.e_y / ny
    cells = supercover_cells(
        (segment.x0 / sx, segment.y0 / sy), (segment.x1 / sx, segment.y1 / sy), nx, ny
    )
    bits = np.zeros((ny, nx), dtype=np.uint8)
    for ix, iy in cells:
        bits[iy, ix] = 1
    return LabelImage(bits=bits, pixel_pitch=sx)


def empty_label(spec: PlateSpec, resolution: tuple[int, int] = (100, 100)) -> LabelImage:
    nx, ny = resolution
    return LabelImage(bits=np.zeros((ny, nx), dtype=np.uint8), pixel_pitch=spec.e_x / nx)


def _overlap_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Positive-measure interval overlaps between source and destination pixel rows."""
    w = np.zeros((n_dst, n_src))
    for j in range(n_dst):
        lo, hi = j / n_dst, (j + 1) / n_dst
        for i in range(n_src):
            a, b = i / n_src, (i + 1) / n_src
            w[j, i] = max(0.0, min(hi, b) - max(lo, a))
    return w


def downsample_label(image: LabelImage, n_out: int = 16) -> LabelImage:
    """Area-map reduction with any-hit binarization: out=1 iff covered fraction > 0."""
    ny, nx = image.bits.shape
    wy = _overlap_matrix(ny, n_out)
    wx = _overlap_matrix(nx, n_out)
    coverage = wy @ image.bits.astype(float) @ wx.T
    bits = (coverage > 1e-12).astype(np.uint8)
    return LabelImage(bits=bits, pixel_pitch=image.pixel_pitch * nx / n_out)


# --- PBM-style serialization ------------------------------------------------


def label_to_pbm(image: LabelImage) -> bytes:
    nx, ny = image.resolution
    lines = [b"P1", f"# pixel_pitch {image.pixel_pitch!r}".encode(), f"{nx} {ny}".encode()]
    for row in image.bits[::-1]:  # PBM is top-down; bits row 0 is the plate bottom
        lines.append(" ".join(str(int(v)) for v in row).encode())
    return b"\n".join(lines) + b"\n"


def label_from_pbm(data: bytes) -> LabelImage:
    lines = data.decode().strip().splitlines()
    if lines[0].strip() != "P1":
        raise ValueError("not a PBM bitmap")
    pitch = float(lines[1].split()[-1])
    nx, ny = (int(v) for v in lines[2].split())
    rows = [[int(v) for v in line.split()] for line in lines[3 : 3 + ny]]
    bits = np.array(rows, dtype=np.uint8)[::-1]
    if bits.shape != (ny, nx):
        raise ValueError("PBM dimensions do not match header")
    return LabelImage(bits=bits, pixel_pitch=pitch)
