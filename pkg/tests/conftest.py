"""Shared fixtures and independent oracles for the test-suite."""

import numpy as np
import pytest

from gentopo.problem import BoundaryConditions, Grid, Loads, ProblemSpec, cantilever


def quadrature_element_matrix(young=1.0, nu=0.3, order=2):
    """Q4 plane-stress stiffness of a unit square by Gauss quadrature (y up, CCW from lower-left)."""
    xy = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    d = young / (1 - nu**2) * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])
    pts, wts = np.polynomial.legendre.leggauss(order)
    ke = np.zeros((8, 8))
    for xi, wx in zip(pts, wts):
        for eta, wy in zip(pts, wts):
            dn = 0.25 * np.array([
                [-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)],
                [-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)],
            ])
            jac = dn @ xy
            dxy = np.linalg.solve(jac, dn)
            b = np.zeros((3, 8))
            b[0, 0::2] = dxy[0]
            b[1, 1::2] = dxy[1]
            b[2, 0::2] = dxy[1]
            b[2, 1::2] = dxy[0]
            ke += wx * wy * np.linalg.det(jac) * b.T @ d @ b
    return ke


def dense_oracle(k, loads, bcs, grid):
    """Displacements from a dense factorisation of the reduced system."""
    f = loads.vector(grid)
    free = bcs.free_dofs(grid)
    u = np.zeros(grid.n_dofs)
    kd = k.toarray()
    u[free] = np.linalg.solve(kd[np.ix_(free, free)], f[free])
    return u


def random_problem_small(rng, nelx, nely):
    """Clamped-left problem with 1-3 random nodal loads away from the clamp."""
    grid = Grid(nelx, nely)
    left = grid.node_id(0, np.arange(nely + 1))
    bcs = BoundaryConditions(np.concatenate([2 * left, 2 * left + 1]))
    n = int(rng.integers(1, 4))
    nodes = grid.node_id(rng.integers(1, nelx + 1, n), rng.integers(0, nely + 1, n))
    return ProblemSpec(grid, Loads(nodes, rng.normal(size=(n, 2))), bcs, 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cantilever16():
    return cantilever(16, 16, 0.4)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
