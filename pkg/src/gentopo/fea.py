"""Plane-stress finite elements on a regular grid of unit square Q4 elements."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import IllPosedProblemError, InvalidInputError, SolverError
from .problem import Grid, Material
from .validation import check_density, check_displacement

logger = logging.getLogger(__name__)

# Centroid derivatives of the bilinear shape functions on a unit square,
# local node order (0,0), (1,0), (1,1), (0,1).
_DN_DX = np.array([-0.5, 0.5, 0.5, -0.5])
_DN_DY = np.array([-0.5, -0.5, 0.5, 0.5])


@lru_cache(maxsize=32)
def _element_stiffness_cached(poisson):
    nu = poisson
    a11 = np.array([[12, 3, -6, -3], [3, 12, 3, 0], [-6, 3, 12, -3], [-3, 0, -3, 12]], float)
    a12 = np.array([[-6, -3, 0, 3], [-3, -6, -3, -6], [0, -3, -6, 3], [3, -6, 3, -6]], float)
    b11 = np.array([[-4, 3, -2, 9], [3, -4, -9, 4], [-2, -9, -4, -3], [9, 4, -3, -4]], float)
    b12 = np.array([[2, -3, 4, -9], [-3, 2, 9, -2], [4, 9, 2, 3], [-9, -2, 3, 2]], float)
    ke = (np.block([[a11, a12], [a12.T, a11]]) + nu * np.block([[b11, b12], [b12.T, b11]])) / (24 * (1 - nu**2))
    ke.setflags(write=False)
    return ke


def element_stiffness(material=Material()):
    """8x8 element matrix for unit Young's modulus (scale by ``E`` per element)."""
    return _element_stiffness_cached(float(material.poisson))


def constitutive_matrix(young, poisson):
    return young / (1 - poisson**2) * np.array([[1, poisson, 0], [poisson, 1, 0], [0, 0, (1 - poisson) / 2]])


def centroid_strain_matrix():
    """3x8 strain-displacement matrix at the element centre (engineering shear)."""
    b = np.zeros((3, 8))
    b[0, 0::2] = _DN_DX
    b[1, 1::2] = _DN_DY
    b[2, 0::2] = _DN_DY
    b[2, 1::2] = _DN_DX
    return b


@lru_cache(maxsize=32)
def _assembly_indices(nelx, nely):
    edof = Grid(nelx, nely).edof_matrix()
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    return edof, rows, cols


def assemble_stiffness(density, penal=3.0, material=Material(), grid=None):
    """Global stiffness matrix (CSR) for a density field of shape ``(nely, nelx)``."""
    if penal < 1:
        raise InvalidInputError("penal must be >= 1")
    if grid is None:
        arr = np.asarray(density)
        if arr.ndim != 2:
            raise InvalidInputError("pass a 2D density or an explicit grid")
        grid = Grid(arr.shape[1], arr.shape[0])
    x = check_density(density, grid)
    _, rows, cols = _assembly_indices(grid.nelx, grid.nely)
    ke = element_stiffness(material)
    e_mod = material.modulus(x.ravel(order="F"), penal)
    vals = (ke.ravel()[None, :] * e_mod[:, None]).ravel()
    k = sp.coo_matrix((vals, (rows, cols)), shape=(grid.n_dofs, grid.n_dofs)).tocsr()
    # duplicate summation order can leave 1-ulp asymmetry; average it away
    k = ((k + k.T) * 0.5).tocsr()
    k.sum_duplicates()
    return k


def check_supports(bcs, grid):
    """Raise if the fixed dofs leave any rigid-body mode free."""
    pos = grid.node_position(np.arange(grid.n_nodes))
    modes = np.zeros((grid.n_dofs, 3))
    modes[0::2, 0] = 1.0
    modes[1::2, 1] = 1.0
    modes[0::2, 2] = -pos[:, 1]
    modes[1::2, 2] = pos[:, 0]
    if np.linalg.matrix_rank(modes[bcs.fixed_dofs]) < 3:
        raise IllPosedProblemError("boundary conditions do not suppress all rigid-body modes")


def pcg(a, b, tol=1e-8, maxiter=None):
    """Jacobi-preconditioned conjugate gradients. Returns ``(x, iterations, rel_residual)``."""
    n = b.shape[0]
    maxiter = 10 * n if maxiter is None else maxiter
    b_norm = np.linalg.norm(b)
    x = np.zeros(n)
    if b_norm == 0:
        return x, 0, 0.0
    diag = a.diagonal()
    if np.any(diag <= 0):
        raise IllPosedProblemError("stiffness matrix has a non-positive diagonal entry")
    inv_diag = 1.0 / diag
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        ap = a @ p
        pap = p @ ap
        if pap <= 0:
            raise IllPosedProblemError("reduced system is not positive definite")
        step = rz / pap
        x += step * p
        r -= step * ap
        res = np.linalg.norm(r) / b_norm
        if res <= tol:
            return x, it, res
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"PCG did not converge in {maxiter} iterations (relative residual {res:.3e})", res, maxiter)


def solve_displacement(k, loads, bcs, grid, method="pcg", tol=1e-8, maxiter=None):
    """Solve ``K U = F`` on the free dofs; fixed dofs are exactly zero.

    ``method`` is ``"pcg"`` (default), ``"direct"`` (sparse LU) or ``"dense"``
    (dense factorisation, intended as a test oracle on small grids).
    """
    if k.shape != (grid.n_dofs, grid.n_dofs):
        raise InvalidInputError(f"stiffness matrix shape {k.shape} does not match grid dofs {grid.n_dofs}")
    bcs.check(grid)
    check_supports(bcs, grid)
    f = loads.vector(grid)
    free = bcs.free_dofs(grid)
    u = np.zeros(grid.n_dofs)
    if not np.any(f[free]):
        return u
    k_ff = k[free][:, free]
    if method == "pcg":
        u[free], _, _ = pcg(k_ff.tocsr(), f[free], tol=tol, maxiter=maxiter)
    elif method == "direct":
        u[free] = spla.spsolve(k_ff.tocsc(), f[free])
    elif method == "dense":
        try:
            u[free] = np.linalg.solve(k_ff.toarray(), f[free])
        except np.linalg.LinAlgError as exc:
            raise IllPosedProblemError(str(exc)) from exc
    else:
        raise InvalidInputError(f"unknown solver method {method!r}")
    return u


def compliance(u, loads, grid=None):
    """``F^T U`` for the load vector built from ``loads``."""
    u = np.asarray(u, dtype=float)
    if grid is not None:
        u = check_displacement(u, grid)
    f = np.zeros_like(u)
    if len(loads.nodes) and 2 * loads.nodes.max() + 1 >= u.size:
        raise InvalidInputError("load node index outside displacement vector")
    np.add.at(f, 2 * loads.nodes, loads.forces[:, 0])
    np.add.at(f, 2 * loads.nodes + 1, loads.forces[:, 1])
    return float(f @ u)


def element_displacements(u, grid):
    edof, _, _ = _assembly_indices(grid.nelx, grid.nely)
    return u[edof]


@dataclass(frozen=True)
class FieldPair:
    von_mises: np.ndarray
    strain_energy: np.ndarray


def stress_energy_fields(u, density, material=Material(), grid=None, penal=3.0):
    """Von Mises stress and strain-energy density at element centroids."""
    if grid is None:
        arr = np.asarray(density)
        grid = Grid(arr.shape[1], arr.shape[0])
    u = check_displacement(u, grid)
    x = check_density(density, grid)
    ue = element_displacements(u, grid)
    eps = ue @ centroid_strain_matrix().T  # (n_el, 3): exx, eyy, gxy
    e_mod = material.modulus(x.ravel(order="F"), penal)
    d0 = constitutive_matrix(1.0, material.poisson)
    sig = (eps @ d0.T) * e_mod[:, None]
    sxx, syy, sxy = sig.T
    vm = np.sqrt(np.maximum(sxx**2 - sxx * syy + syy**2 + 3 * sxy**2, 0.0))
    w = 0.5 * np.maximum(np.einsum("ij,ij->i", sig, eps), 0.0)
    return FieldPair(vm.reshape(grid.shape, order="F"), w.reshape(grid.shape, order="F"))


def analyze(problem, density, penal=3.0, material=Material(), method="pcg", tol=1e-8):
    """Assemble, solve and return ``(U, compliance)`` for a problem and density."""
    k = assemble_stiffness(density, penal, material, problem.grid)
    u = solve_displacement(k, problem.loads, problem.bcs, problem.grid, method=method, tol=tol)
    return u, compliance(u, problem.loads)
