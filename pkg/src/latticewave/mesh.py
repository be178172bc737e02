"""Random plate lattices: particle seeding, Delaunay elements, Voronoi cells, matrix assembly.

A plate is discretized into particles (Voronoi cell centers) connected by
truss elements along the Delaunay edges of the particle set.  Each element
carries an axial stiffness E*A/L rotated into global coordinates and a lumped
mass 0.5*rho*A*L per node.  Global K and M are assembled by scatter-add over
the two endpoint DOF pairs.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix, diags
from scipy.spatial import Delaunay, QhullError, Voronoi
from shapely.geometry import LineString, Polygon, box


class MeshGenerationError(RuntimeError):
    """Lattice generation failed (degenerate triangulation or broken cell geometry)."""


class IsolatedParticleWarning(UserWarning):
    """A particle has no active incident element; its DOFs are dropped from the free set."""


@dataclass(frozen=True)
class PlateSpec:
    """Geometry, material and seeding parameters of a rectangular plate."""

    e_x: float
    e_y: float
    youngs_modulus: float
    density: float
    thickness: float = 1.0
    n_particles: int = 10000
    seed: int = 0
    jitter: float = 0.45  # max offset as fraction of a grid cell

    def validate(self) -> None:
        if not (self.e_x > 0 and self.e_y > 0):
            raise ValueError("plate edges must be positive")
        if not (self.youngs_modulus > 0 and self.density > 0):
            raise ValueError("material parameters must be positive")
        if self.thickness <= 0:
            raise ValueError("thickness must be positive")
        if self.n_particles < 4:
            raise ValueError("need at least 4 particles")
        if not 0.0 <= self.jitter < 0.5:
            raise ValueError("jitter must lie in [0, 0.5)")


@dataclass
class Particle:
    id: int
    x: float
    y: float
    cell_area: float = 0.0
    removed: bool = False

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass
class LatticeElement:
    id: int
    node_a: int
    node_b: int
    length: float
    area: float
    orientation: float
    active: bool = True


def element_stiffness(E: float, A: float, L: float, phi: float) -> np.ndarray:
    """Global 4x4 truss stiffness T^T K_local T for one element.

    K_local is the axial spring matrix (EA/L) acting on the local x axis; T is
    the plane rotation by the element orientation phi.
    """
    if not (E > 0 and L > 0 and A >= 0):
        raise ValueError("need E > 0, L > 0, A >= 0")
    c, s = math.cos(phi), math.sin(phi)
    T = np.array(
        [
            [c, s, 0.0, 0.0],
            [-s, c, 0.0, 0.0],
            [0.0, 0.0, c, s],
            [0.0, 0.0, -s, c],
        ]
    )
    k_local = (E * A / L) * np.array(
        [
            [1.0, 0.0, -1.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            [-1.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
        ]
    )
    return T.T @ k_local @ T


def element_mass(rho: float, A: float, L: float) -> np.ndarray:
    """Lumped element mass matrix 0.5 * rho*A*L * I4 (half the bar mass per node)."""
    if not (rho > 0 and L > 0 and A >= 0):
        raise ValueError("need rho > 0, L > 0, A >= 0")
    return 0.5 * rho * A * L * np.eye(4)


def _stiffness_batch(E: float, A: np.ndarray, L: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Stack of element stiffness matrices from the closed-form l=cos, m=sin expansion."""
    c, s = np.cos(phi), np.sin(phi)
    k = E * A / L
    cc, ss, cs = c * c, s * s, c * s
    out = np.empty((len(L), 4, 4))
    out[:, 0, 0] = cc
    out[:, 0, 1] = cs
    out[:, 0, 2] = -cc
    out[:, 0, 3] = -cs
    out[:, 1, 0] = cs
    out[:, 1, 1] = ss
    out[:, 1, 2] = -cs
    out[:, 1, 3] = -ss
    out[:, 2, 0] = -cc
    out[:, 2, 1] = -cs
    out[:, 2, 2] = cc
    out[:, 2, 3] = cs
    out[:, 3, 0] = -cs
    out[:, 3, 1] = -ss
    out[:, 3, 2] = cs
    out[:, 3, 3] = ss
    out *= k[:, None, None]
    return out


def assemble_global(
    particles: list[Particle],
    elements: list[LatticeElement],
    k_mats: np.ndarray,
    m_mats: np.ndarray,
) -> tuple[csr_matrix, csr_matrix]:
    """Scatter-add per-element 4x4 K and M stacks into global sparse matrices.

    Inactive elements and elements touching removed particles contribute
    nothing.  Returns (K, M) with M diagonal.
    """
    n = len(particles)
    ndof = 2 * n
    removed = np.array([p.removed for p in particles], dtype=bool)
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    mass = np.zeros(ndof)
    for e, ke, me in zip(elements, k_mats, m_mats):
        if not e.active or removed[e.node_a] or removed[e.node_b]:
            continue
        dofs = np.array(
            [2 * e.node_a, 2 * e.node_a + 1, 2 * e.node_b, 2 * e.node_b + 1]
        )
        rr, cc = np.meshgrid(dofs, dofs, indexing="ij")
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        vals.append(ke.ravel())
        mass[dofs] += np.diag(me)
    if rows:
        K = coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(ndof, ndof),
        ).tocsr()
    else:
        K = csr_matrix((ndof, ndof))
    M = diags(mass, format="csr")
    return K, M


@dataclass
class LatticeModel:
    """Assembled plate lattice: particles, elements, global K/M and constraints."""

    spec: PlateSpec
    particles: list[Particle]
    elements: list[LatticeElement]
    K: csr_matrix
    M: csr_matrix
    fixed_dofs: frozenset[int]
    fixed_band: float
    cell_polygons: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def n_particles(self) -> int:
        return len(self.particles)

    @property
    def ndof(self) -> int:
        return 2 * len(self.particles)

    @property
    def positions(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.particles])

    @property
    def mass_diag(self) -> np.ndarray:
        return np.asarray(self.M.diagonal())

    @property
    def free_dofs(self) -> np.ndarray:
        """DOF indices that are unconstrained and attached to at least one element."""
        n = len(self.particles)
        attached = np.zeros(n, dtype=bool)
        removed = np.array([p.removed for p in self.particles], dtype=bool)
        for e in self.elements:
            # zero-area elements carry no stiffness or mass and do not attach
            if e.active and e.area > 0 and not removed[e.node_a] and not removed[e.node_b]:
                attached[e.node_a] = True
                attached[e.node_b] = True
        free = []
        for i in range(n):
            if removed[i] or not attached[i]:
                continue
            for d in (2 * i, 2 * i + 1):
                if d not in self.fixed_dofs:
                    free.append(d)
        return np.array(free, dtype=np.intp)

    def element_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-element stiffness and mass stacks for all elements (active or not)."""
        A = np.array([e.area for e in self.elements])
        L = np.array([e.length for e in self.elements])
        phi = np.array([e.orientation for e in self.elements])
        k_mats = _stiffness_batch(self.spec.youngs_modulus, A, L, phi)
        m_mats = 0.5 * self.spec.density * (A * L)[:, None, None] * np.eye(4)
        return k_mats, m_mats

    def reassemble(self) -> None:
        """Recompute K and M after changing removal/active flags."""
        k_mats, m_mats = self.element_matrices()
        self.K, self.M = assemble_global(self.particles, self.elements, k_mats, m_mats)
        self._warn_isolated()

    def _warn_isolated(self) -> None:
        n = len(self.particles)
        attached = np.zeros(n, dtype=bool)
        removed = np.array([p.removed for p in self.particles], dtype=bool)
        for e in self.elements:
            if e.active and e.area > 0 and not removed[e.node_a] and not removed[e.node_b]:
                attached[e.node_a] = True
                attached[e.node_b] = True
        isolated = np.nonzero(~attached & ~removed)[0]
        if len(isolated):
            warnings.warn(
                f"{len(isolated)} particle(s) without active elements excluded "
                f"from the free set: {isolated[:8].tolist()}",
                IsolatedParticleWarning,
            )


def _seed_points(spec: PlateSpec, rng: np.random.Generator) -> np.ndarray:
    """Jittered-grid seeds: one particle per cell of an approx sqrt(n) x sqrt(n) grid."""
    n = spec.n_particles
    m = math.ceil(math.sqrt(n))
    rows = math.ceil(n / m)
    cw, ch = spec.e_x / m, spec.e_y / rows
    idx = np.arange(n)
    ix = idx % m
    iy = idx // m
    cx = (ix + 0.5) * cw
    cy = (iy + 0.5) * ch
    off = rng.uniform(-spec.jitter, spec.jitter, size=(n, 2))
    pts = np.column_stack([cx + off[:, 0] * cw, cy + off[:, 1] * ch])
    return pts


def _mirror_points(points: np.ndarray, e_x: float, e_y: float) -> np.ndarray:
    """Reflections of the seed set across the four plate edges.

    A point lying exactly on an edge would reflect onto itself; its mirror is
    pushed slightly outward instead so qhull sees distinct sites.  The later
    clip to the plate rectangle removes the tiny geometric error exactly.
    """
    eps_x, eps_y = 1e-4 * e_x, 1e-4 * e_y
    mirrors = []
    for axis, lo, hi, eps in ((0, 0.0, e_x, eps_x), (1, 0.0, e_y, eps_y)):
        for edge in (lo, hi):
            m = points.copy()
            m[:, axis] = 2 * edge - m[:, axis]
            on_edge = np.abs(points[:, axis] - edge) < 0.5 * eps
            sign = -1.0 if edge == lo else 1.0
            m[on_edge, axis] = edge + sign * eps
            mirrors.append(m)
    return np.vstack(mirrors)


def _ridge_segment(
    vor: Voronoi, ridge_idx: int, p: int, q: int
) -> tuple[np.ndarray, np.ndarray] | None:
    """Endpoints of a Voronoi ridge, reconstructing the open end of infinite ridges."""
    verts = vor.ridge_vertices[ridge_idx]
    if -1 not in verts:
        return vor.vertices[verts[0]], vor.vertices[verts[1]]
    finite = [v for v in verts if v != -1]
    if not finite:
        return None
    v0 = vor.vertices[finite[0]]
    mid = 0.5 * (vor.points[p] + vor.points[q])
    tangent = vor.points[q] - vor.points[p]
    normal = np.array([-tangent[1], tangent[0]])
    span = np.ptp(vor.points, axis=0).max()
    center = vor.points.mean(axis=0)
    if np.dot(mid - center, normal) < 0:
        normal = -normal
    far = v0 + normal / np.linalg.norm(normal) * 4.0 * span
    return v0, far


def _clipped_voronoi(
    points: np.ndarray, e_x: float, e_y: float
) -> tuple[np.ndarray, list[np.ndarray], dict[tuple[int, int], float]]:
    """Voronoi cells of the seeds clipped to the plate rectangle.

    Uses edge mirroring so interior cells come out already bounded; every cell
    is intersected with the plate box as a final exact clip.  Returns per-seed
    cell areas, cell polygons (vertex arrays), and the clipped shared-facet
    length for each neighboring seed pair.
    """
    n = len(points)
    all_pts = np.vstack([points, _mirror_points(points, e_x, e_y)])
    vor = Voronoi(all_pts)
    plate = box(0.0, 0.0, e_x, e_y)

    areas = np.zeros(n)
    polygons: list[np.ndarray] = []
    for i in range(n):
        region = vor.regions[vor.point_region[i]]
        if -1 in region or len(region) < 3:
            raise MeshGenerationError(f"unbounded Voronoi cell for particle {i}")
        poly = Polygon(vor.vertices[region]).intersection(plate)
        if poly.is_empty or poly.geom_type != "Polygon":
            raise MeshGenerationError(f"degenerate Voronoi cell for particle {i}")
        areas[i] = poly.area
        polygons.append(np.asarray(poly.exterior.coords))

    facets: dict[tuple[int, int], float] = {}
    for ridge_idx, (p, q) in enumerate(vor.ridge_points):
        if p >= n or q >= n:
            continue
        seg = _ridge_segment(vor, ridge_idx, p, q)
        if seg is None:
            continue
        clipped = LineString(seg).intersection(plate)
        key = (min(p, q), max(p, q))
        facets[key] = clipped.length
    return areas, polygons, facets


def _delaunay_edges(points: np.ndarray) -> list[tuple[int, int]]:
    tri = Delaunay(points)
    edges = set()
    for simplex in tri.simplices:
        for a, b in ((0, 1), (1, 2), (0, 2)):
            i, j = simplex[a], simplex[b]
            edges.add((min(i, j), max(i, j)))
    return sorted(edges)


def build_from_positions(
    spec: PlateSpec, positions: np.ndarray, fixed_band: float | None = None
) -> LatticeModel:
    """Assemble a lattice model from explicit particle positions."""
    spec.validate()
    positions = np.asarray(positions, dtype=float)
    if positions.shape != (spec.n_particles, 2):
        raise ValueError("positions must be (n_particles, 2)")
    if (
        positions[:, 0].min() < 0
        or positions[:, 0].max() > spec.e_x
        or positions[:, 1].min() < 0
        or positions[:, 1].max() > spec.e_y
    ):
        raise ValueError("particle positions must lie inside the plate")
    if fixed_band is None:
        fixed_band = 0.05 * spec.e_y

    try:
        edges = _delaunay_edges(positions)
    except QhullError as exc:
        raise MeshGenerationError(f"degenerate triangulation: {exc}") from exc
    areas, polygons, facets = _clipped_voronoi(positions, spec.e_x, spec.e_y)

    total = areas.sum()
    if abs(total - spec.e_x * spec.e_y) > 1e-9 * spec.e_x * spec.e_y:
        raise MeshGenerationError(
            f"cell areas sum to {total}, expected {spec.e_x * spec.e_y}"
        )

    particles = [
        Particle(id=i, x=float(positions[i, 0]), y=float(positions[i, 1]), cell_area=float(areas[i]))
        for i in range(spec.n_particles)
    ]
    elements = []
    for eid, (a, b) in enumerate(edges):
        dx = positions[b, 0] - positions[a, 0]
        dy = positions[b, 1] - positions[a, 1]
        L = math.hypot(dx, dy)
        if L <= 0:
            raise MeshGenerationError(f"zero-length element between {a} and {b}")
        area = facets.get((a, b), 0.0) * spec.thickness
        elements.append(
            LatticeElement(
                id=eid,
                node_a=a,
                node_b=b,
                length=L,
                area=area,
                orientation=math.atan2(dy, dx),
            )
        )

    fixed = frozenset(
        d
        for i, p in enumerate(particles)
        if p.y < fixed_band
        for d in (2 * i, 2 * i + 1)
    )
    model = LatticeModel(
        spec=spec,
        particles=particles,
        elements=elements,
        K=csr_matrix((0, 0)),
        M=csr_matrix((0, 0)),
        fixed_dofs=fixed,
        fixed_band=fixed_band,
        cell_polygons=polygons,
    )
    model.reassemble()
    return model


def generate_lattice(spec: PlateSpec, fixed_band: float | None = None) -> LatticeModel:
    """Generate a random plate lattice; deterministic for a fixed (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    last: Exception | None = None
    for _ in range(10):
        points = _seed_points(spec, rng)
        try:
            return build_from_positions(spec, points, fixed_band=fixed_band)
        except MeshGenerationError as exc:
            last = exc
    raise MeshGenerationError(f"lattice generation failed after 10 attempts: {last}")


def ensure_cell_geometry(model: LatticeModel) -> list[np.ndarray]:
    """Return cell polygons, recomputing them if the model was deserialized."""
    if model.cell_polygons is None:
        _, polygons, _ = _clipped_voronoi(model.positions, model.spec.e_x, model.spec.e_y)
        model.cell_polygons = polygons
    return model.cell_polygons


# --- binary container -------------------------------------------------------
#
# Layout (little-endian):
#   magic "WLTC", version u16
#   u32 n_particles, u32 n_elements, u32 n_fixed
#   f64 e_x, e_y, E, rho, thickness, jitter, fixed_band; i64 seed; u32 n_particles_spec
#   per particle: f64 x, f64 y, f64 cell_area, u8 removed
#   per element:  u32 a, u32 b, f64 L, f64 A, f64 phi, u8 active
#   fixed DOF indices: n_fixed * u32

_MAGIC = b"WLTC"
_VERSION = 1


def serialize_model(model: LatticeModel) -> bytes:
    s = model.spec
    fixed = sorted(model.fixed_dofs)
    out = [
        _MAGIC,
        struct.pack(
            "<HIII", _VERSION, len(model.particles), len(model.elements), len(fixed)
        ),
        struct.pack(
            "<7dqI",
            s.e_x,
            s.e_y,
            s.youngs_modulus,
            s.density,
            s.thickness,
            s.jitter,
            model.fixed_band,
            s.seed,
            s.n_particles,
        ),
    ]
    for p in model.particles:
        out.append(struct.pack("<3dB", p.x, p.y, p.cell_area, int(p.removed)))
    for e in model.elements:
        out.append(
            struct.pack("<II3dB", e.node_a, e.node_b, e.length, e.area, e.orientation, int(e.active))
        )
    out.append(struct.pack(f"<{len(fixed)}I", *fixed))
    return b"".join(out)


def deserialize_model(data: bytes) -> LatticeModel:
    if data[:4] != _MAGIC:
        raise ValueError("not a lattice container (bad magic)")
    off = 4
    version, n_p, n_e, n_f = struct.unpack_from("<HIII", data, off)
    if version != _VERSION:
        raise ValueError(f"unsupported lattice container version {version}")
    off += struct.calcsize("<HIII")
    e_x, e_y, E, rho, thickness, jitter, fixed_band, seed, n_spec = struct.unpack_from(
        "<7dqI", data, off
    )
    off += struct.calcsize("<7dqI")
    spec = PlateSpec(
        e_x=e_x,
        e_y=e_y,
        youngs_modulus=E,
        density=rho,
        thickness=thickness,
        n_particles=n_spec,
        seed=seed,
        jitter=jitter,
    )
    particles = []
    for i in range(n_p):
        x, y, area, removed = struct.unpack_from("<3dB", data, off)
        off += struct.calcsize("<3dB")
        particles.append(Particle(id=i, x=x, y=y, cell_area=area, removed=bool(removed)))
    elements = []
    for i in range(n_e):
        a, b, L, A, phi, active = struct.unpack_from("<II3dB", data, off)
        off += struct.calcsize("<II3dB")
        elements.append(
            LatticeElement(id=i, node_a=a, node_b=b, length=L, area=A, orientation=phi, active=bool(active))
        )
    fixed = frozenset(struct.unpack_from(f"<{n_f}I", data, off))
    model = LatticeModel(
        spec=spec,
        particles=particles,
        elements=elements,
        K=csr_matrix((0, 0)),
        M=csr_matrix((0, 0)),
        fixed_dofs=fixed,
        fixed_band=fixed_band,
        cell_polygons=None,
    )
    model.reassemble()
    return model
