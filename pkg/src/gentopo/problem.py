"""Problem description: grid, material, loads, supports and volume target.

Node and element numbering follows the column-major convention of the
classic 88-line SIMP code. With ``i`` the node column (0..nelx) and ``j``
the node row counted from the top (0..nely)::

    node id   = i * (nely + 1) + j
    dofs      = 2 * id (x), 2 * id + 1 (y, positive upward)
    element e = ex * nely + ey

Density fields are stored as ``(nely, nelx)`` arrays, so
``density.ravel(order="F")[e]`` is element ``e``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError


@dataclass(frozen=True)
class Grid:
    nelx: int
    nely: int

    def __post_init__(self):
        if int(self.nelx) < 1 or int(self.nely) < 1:
            raise InvalidInputError(f"grid must be at least 1x1, got {self.nelx}x{self.nely}")

    @property
    def shape(self):
        return (self.nely, self.nelx)

    @property
    def n_elements(self):
        return self.nelx * self.nely

    @property
    def n_nodes(self):
        return (self.nelx + 1) * (self.nely + 1)

    @property
    def n_dofs(self):
        return 2 * self.n_nodes

    def node_id(self, i, j):
        return np.asarray(i) * (self.nely + 1) + np.asarray(j)

    def node_position(self, node):
        """(column, row) grid coordinates of a node id."""
        node = np.asarray(node)
        return np.stack([node // (self.nely + 1), node % (self.nely + 1)], axis=-1).astype(float)

    def element_centroids(self):
        """Arrays ``(cx, cy)`` of shape ``(nely, nelx)`` in grid coordinates."""
        cy, cx = np.mgrid[0 : self.nely, 0 : self.nelx].astype(float)
        return cx + 0.5, cy + 0.5

    def elements_adjacent_to_node(self, node):
        """Flat (row-major) indices into a ``(nely, nelx)`` array of elements touching ``node``."""
        i, j = (int(v) for v in self.node_position(node))
        out = []
        for ex in (i - 1, i):
            for ey in (j - 1, j):
                if 0 <= ex < self.nelx and 0 <= ey < self.nely:
                    out.append(ey * self.nelx + ex)
        return out

    def edof_matrix(self):
        """``(n_elements, 8)`` dof indices, element order ``e = ex*nely + ey``.

        Local node order is counter-clockwise from the lower-left corner
        (in the y-up physical frame): (ex, ey+1), (ex+1, ey+1), (ex+1, ey), (ex, ey).
        """
        ex, ey = np.meshgrid(np.arange(self.nelx), np.arange(self.nely), indexing="ij")
        ex, ey = ex.ravel(), ey.ravel()
        n_ll = self.node_id(ex, ey + 1)
        n_lr = self.node_id(ex + 1, ey + 1)
        n_ur = self.node_id(ex + 1, ey)
        n_ul = self.node_id(ex, ey)
        nodes = np.stack([n_ll, n_lr, n_ur, n_ul], axis=1)
        edof = np.empty((self.n_elements, 8), dtype=np.int64)
        edof[:, 0::2] = 2 * nodes
        edof[:, 1::2] = 2 * nodes + 1
        return edof


@dataclass(frozen=True)
class Material:
    young_solid: float = 1.0
    young_void: float = 1e-9
    poisson: float = 0.3

    def __post_init__(self):
        if not self.young_solid > self.young_void > 0:
            raise InvalidInputError("need young_solid > young_void > 0")
        if not 0 <= self.poisson < 0.5:
            raise InvalidInputError("poisson ratio must lie in [0, 0.5)")

    def modulus(self, density, penal):
        """Modified SIMP interpolation ``E_void + x**p (E_solid - E_void)``."""
        return self.young_void + np.asarray(density) ** penal * (self.young_solid - self.young_void)


@dataclass(frozen=True, eq=False)
class Loads:
    """Point loads on nodes: ``nodes`` (k,) and ``forces`` (k, 2)."""

    nodes: np.ndarray
    forces: np.ndarray

    def __post_init__(self):
        nodes = np.atleast_1d(np.asarray(self.nodes, dtype=np.int64))
        forces = np.asarray(self.forces, dtype=float).reshape(-1, 2)
        if len(nodes) != len(forces):
            raise InvalidInputError("loads need one (fx, fy) pair per node")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "forces", forces)

    def __eq__(self, other):
        if not isinstance(other, Loads):
            return NotImplemented
        return np.array_equal(self.nodes, other.nodes) and np.array_equal(self.forces, other.forces)

    __hash__ = None

    @classmethod
    def from_entries(cls, entries):
        entries = list(entries)
        if not entries:
            return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 2)))
        nodes, fx, fy = zip(*entries)
        return cls(np.array(nodes), np.column_stack([fx, fy]))

    def entries(self):
        return [(int(n), float(f[0]), float(f[1])) for n, f in zip(self.nodes, self.forces)]

    def vector(self, grid):
        if len(self.nodes) and (self.nodes.min() < 0 or self.nodes.max() >= grid.n_nodes):
            raise InvalidInputError("load node index outside grid")
        f = np.zeros(grid.n_dofs)
        np.add.at(f, 2 * self.nodes, self.forces[:, 0])
        np.add.at(f, 2 * self.nodes + 1, self.forces[:, 1])
        return f

    def scaled(self, s):
        return Loads(self.nodes.copy(), self.forces * s)

    @property
    def magnitudes(self):
        return np.hypot(self.forces[:, 0], self.forces[:, 1])


@dataclass(frozen=True, eq=False)
class BoundaryConditions:
    fixed_dofs: np.ndarray

    def __post_init__(self):
        dofs = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        if dofs.size == 0:
            raise InvalidInputError("at least one fixed dof is required")
        object.__setattr__(self, "fixed_dofs", dofs)

    def __eq__(self, other):
        if not isinstance(other, BoundaryConditions):
            return NotImplemented
        return np.array_equal(self.fixed_dofs, other.fixed_dofs)

    __hash__ = None

    def check(self, grid):
        if self.fixed_dofs.min() < 0 or self.fixed_dofs.max() >= grid.n_dofs:
            raise InvalidInputError("fixed dof index outside grid")

    def free_dofs(self, grid):
        mask = np.ones(grid.n_dofs, dtype=bool)
        mask[self.fixed_dofs] = False
        return np.flatnonzero(mask)

    @property
    def fixed_nodes(self):
        return np.unique(self.fixed_dofs // 2)


@dataclass(frozen=True)
class ProblemSpec:
    grid: Grid
    loads: Loads
    bcs: BoundaryConditions
    vf_target: float
    optimal_compliance: float | None = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if not 0 < self.vf_target < 1:
            raise InvalidInputError(f"vf_target must be in (0, 1), got {self.vf_target}")
        self.bcs.check(self.grid)
        self.loads.vector(self.grid)

    def to_dict(self):
        return {
            "name": self.name,
            "nelx": self.grid.nelx,
            "nely": self.grid.nely,
            "loads": [list(e) for e in self.loads.entries()],
            "fixed_dofs": self.bcs.fixed_dofs.tolist(),
            "vf_target": float(self.vf_target),
            "optimal_compliance": self.optimal_compliance,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            grid=Grid(int(d["nelx"]), int(d["nely"])),
            loads=Loads.from_entries(tuple(e) for e in d["loads"]),
            bcs=BoundaryConditions(np.asarray(d["fixed_dofs"], dtype=np.int64)),
            vf_target=float(d["vf_target"]),
            optimal_compliance=d.get("optimal_compliance"),
            name=d.get("name", ""),
        )


def cantilever(nelx, nely, vf=0.4, force=(0.0, -1.0), load_row=None):
    """Left edge clamped, point load on the right edge (mid-height by default)."""
    grid = Grid(nelx, nely)
    left = grid.node_id(0, np.arange(nely + 1))
    fixed = np.concatenate([2 * left, 2 * left + 1])
    row = nely // 2 if load_row is None else load_row
    loads = Loads([grid.node_id(nelx, row)], [force])
    return ProblemSpec(grid, loads, BoundaryConditions(fixed), vf, name=f"cantilever_{nelx}x{nely}")
