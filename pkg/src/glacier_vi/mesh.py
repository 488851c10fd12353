"""Horizontal interval mesh, nodal P1 fields on it, and the vertically
extruded quadrilateral mesh of the ice between bed and surface."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InadmissibleGeometry, InvalidArgument


@dataclass(frozen=True)
class IntervalMesh:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or len(nodes) < 2 or np.any(np.diff(nodes) <= 0):
            raise InvalidArgument("interval mesh nodes must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)
        nodes.setflags(write=False)

    @property
    def nx(self):
        return len(self.nodes) - 1

    @property
    def L(self):
        return 0.5 * (self.nodes[-1] - self.nodes[0])

    @property
    def dx(self):
        """Cell widths, shape (nx,)."""
        return np.diff(self.nodes)

    @property
    def cells(self):
        i = np.arange(self.nx)
        return np.column_stack([i, i + 1])

    def nodal_mass(self):
        """Lumped P1 mass: integral of each hat function."""
        m = np.zeros(self.nx + 1)
        m[:-1] += 0.5 * self.dx
        m[1:] += 0.5 * self.dx
        return m

    def same_as(self, other):
        return self is other or (
            len(self.nodes) == len(other.nodes) and np.allclose(self.nodes, other.nodes, rtol=0, atol=1e-9 * self.L)
        )


def build_interval(L, nx):
    """Uniform mesh of [-L, L] with nx cells."""
    if not L > 0:
        raise InvalidArgument(f"half-length L must be positive, got {L}")
    if int(nx) != nx or nx < 2:
        raise InvalidArgument(f"need at least 2 cells, got nx={nx}")
    nodes = np.linspace(-L, L, int(nx) + 1)
    return IntervalMesh(nodes)


@dataclass
class SurfaceField:
    """Continuous piecewise-linear function given by its nodal values."""

    mesh: IntervalMesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if self.values.shape != self.mesh.nodes.shape:
            raise InvalidArgument(
                f"field has {self.values.size} values but mesh has {self.mesh.nodes.size} nodes"
            )

    def copy(self):
        return SurfaceField(self.mesh, self.values.copy())

    def slope(self):
        """Derivative on each cell (constant for P1)."""
        return np.diff(self.values) / self.mesh.dx

    def nodal_slope(self):
        """Mean of the adjacent cell slopes (one-sided at the ends)."""
        return np.gradient(self.values, self.mesh.nodes)

    def __call__(self, x):
        return np.interp(x, self.mesh.nodes, self.values)

    def check_same_mesh(self, other):
        if not self.mesh.same_as(other.mesh):
            raise InvalidArgument("fields live on different meshes")


def check_admissible(s, b, tol=0.0):
    bad = np.nonzero(s.values < b.values - tol)[0]
    if len(bad):
        i = bad[0]
        raise InadmissibleGeometry(
            f"surface below bed at {len(bad)} node(s), first x={s.mesh.nodes[i]:.1f}: "
            f"s={s.values[i]:.6g} < b={b.values[i]:.6g}"
        )


@dataclass
class ExtrudedMesh:
    """Quadrilaterals between bed and surface, nz equal layers per column.

    A vertex column is active when its thickness reaches `H_min`.  A cell
    (pair of adjacent columns) is meshed when at least one of its two
    columns is active; the edge at an inactive column is a short (possibly
    zero-length) lateral face that carries zero velocity.
    """

    base: IntervalMesh
    nz: int
    H_min: float
    bed: np.ndarray
    surface: np.ndarray
    column_active: np.ndarray = field(init=False)
    cell_active: np.ndarray = field(init=False)
    z: np.ndarray = field(init=False)   # (nx+1, nz+1) vertex elevations

    def __post_init__(self):
        H = self.surface - self.bed
        self.column_active = H >= self.H_min
        self.cell_active = self.column_active[:-1] | self.column_active[1:]
        frac = np.arange(self.nz + 1) / self.nz
        self.z = self.bed[:, None] + H[:, None] * frac[None, :]
        for a in (self.bed, self.surface, self.column_active, self.cell_active, self.z):
            a.setflags(write=False)

    @property
    def thickness(self):
        return self.surface - self.bed

    @property
    def active_cells(self):
        return np.nonzero(self.cell_active)[0]

    @property
    def n_quads(self):
        return int(self.cell_active.sum()) * self.nz

    @property
    def has_ice(self):
        return bool(self.cell_active.any())

    def quad_areas(self):
        """Exact areas (nx_active, nz) of the straight-sided quadrilaterals."""
        c = self.active_cells
        dx = self.base.dx[c]
        h = self.thickness / self.nz
        return (0.5 * dx * (h[c] + h[c + 1]))[:, None] * np.ones(self.nz)[None, :]

    def area(self):
        return float(self.quad_areas().sum())

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["x_m", "bed_m", "surface_m", "thickness_m", "column_active"])
            for x, b, s, a in zip(self.base.nodes, self.bed, self.surface, self.column_active):
                w.writerow([f"{x:.6f}", f"{b:.6f}", f"{s:.6f}", f"{s - b:.6f}", int(a)])


def extrude(base, b, s, nz, H_min=10.0, dump=None):
    if nz < 1 or int(nz) != nz:
        raise InvalidArgument(f"need nz >= 1 layers, got {nz}")
    if not H_min > 0:
        raise InvalidArgument(f"H_min must be positive, got {H_min}")
    for f in (b, s):
        if not f.mesh.same_as(base):
            raise InvalidArgument("bed/surface are not on the base mesh")
    check_admissible(s, b)
    mesh = ExtrudedMesh(base, int(nz), float(H_min), b.values.copy(), s.values.copy())
    if dump:
        mesh.to_csv(dump)
    return mesh
