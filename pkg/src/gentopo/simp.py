"""Minimum-compliance SIMP with a sensitivity filter and optimality-criteria updates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import fea
from .exceptions import InfeasibleVolumeError, InvalidInputError
from .problem import Material
from .validation import check_density

logger = logging.getLogger(__name__)

# Lower bound used where the update divides by or multiplies with density,
# so fully void elements can still regain material.
_DENSITY_FLOOR = 1e-3


@dataclass(frozen=True)
class SimpConfig:
    penal: float = 3.0
    filter_radius: float = 1.5
    move_limit: float = 0.2
    max_iters: int = 100
    vf_target: float | None = None  # None: take it from the problem
    bisection_tol: float = 1e-4
    change_tol: float = 0.01
    solver: str = "pcg"
    solver_tol: float = 1e-8
    material: Material = field(default_factory=Material)

    def __post_init__(self):
        if self.penal < 1:
            raise InvalidInputError("penal must be >= 1")
        if self.filter_radius < 1:
            raise InvalidInputError("filter_radius must be >= 1")
        if not 0 < self.move_limit <= 1:
            raise InvalidInputError("move_limit must be in (0, 1]")
        if self.vf_target is not None and not 0 < self.vf_target < 1:
            raise InvalidInputError("vf_target must be in (0, 1)")
        if self.max_iters < 0:
            raise InvalidInputError("max_iters must be >= 0")


@dataclass
class OptimizationTrace:
    compliances: list = field(default_factory=list)
    changes: list = field(default_factory=list)
    density: np.ndarray | None = None
    final_compliance: float | None = None
    converged: bool = False

    @property
    def n_iters(self):
        return len(self.compliances)


def compliance_sensitivity(density, u, config=SimpConfig(), material=None, grid=None):
    """Adjoint sensitivity ``-p x^(p-1) (E0 - Emin) u_e^T k0 u_e`` per element."""
    material = config.material if material is None else material
    x = np.asarray(density, dtype=float)
    if grid is None:
        from .problem import Grid

        grid = Grid(x.shape[1], x.shape[0])
    x = check_density(x, grid)
    ue = fea.element_displacements(np.asarray(u, dtype=float), grid)
    ke = fea.element_stiffness(material)
    energy = np.einsum("ij,jk,ik->i", ue, ke, ue)
    p = config.penal
    xf = x.ravel(order="F")
    dc = -p * xf ** (p - 1) * (material.young_solid - material.young_void) * energy
    return dc.reshape(grid.shape, order="F")


@lru_cache(maxsize=32)
def filter_matrix(nely, nelx, radius):
    """Sparse weights ``max(0, radius - dist)`` over row-major element indices, and row sums."""
    reach = int(np.ceil(radius)) - 1
    rows, cols, vals = [], [], []
    iy, ix = np.mgrid[0:nely, 0:nelx]
    iy, ix = iy.ravel(), ix.ravel()
    idx = iy * nelx + ix
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            w = radius - np.hypot(dx, dy)
            if w <= 0:
                continue
            jy, jx = iy + dy, ix + dx
            ok = (jy >= 0) & (jy < nely) & (jx >= 0) & (jx < nelx)
            rows.append(idx[ok])
            cols.append((jy * nelx + jx)[ok])
            vals.append(np.full(ok.sum(), w))
    h = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nely * nelx,) * 2
    )
    return h, np.asarray(h.sum(axis=1)).ravel()


def filter_sensitivities(raw, density, radius):
    """Classic density-weighted sensitivity filter; identity for ``radius <= 1``."""
    raw = np.asarray(raw, dtype=float)
    if radius <= 1:
        return raw.copy()
    x = np.asarray(density, dtype=float)
    if x.shape != raw.shape:
        raise InvalidInputError("density and sensitivity shapes differ")
    h, hs = filter_matrix(raw.shape[0], raw.shape[1], float(radius))
    out = (h @ (x * raw).ravel()) / hs / np.maximum(_DENSITY_FLOOR, x.ravel())
    return out.reshape(raw.shape)


def oc_update(density, sensitivity, config=SimpConfig(), vf_target=None, clip_infeasible=False):
    """Optimality-criteria step with move limits and a bisected volume multiplier.

    If the target volume lies outside what the move limits allow, raise
    :class:`InfeasibleVolumeError`, or with ``clip_infeasible`` take the full
    move-limited step toward the target.
    """
    vf = config.vf_target if vf_target is None else vf_target
    if vf is None:
        raise InvalidInputError("oc_update needs a volume target")
    x = np.asarray(density, dtype=float)
    s = np.maximum(-np.asarray(sensitivity, dtype=float), 1e-300)
    lower = np.maximum(0.0, x - config.move_limit)
    upper = np.minimum(1.0, x + config.move_limit)
    tol = config.bisection_tol
    if upper.mean() < vf - tol or lower.mean() > vf + tol:
        if clip_infeasible:
            logger.debug("volume %.4f beyond move limit, taking the bounded step", vf)
            return upper if upper.mean() < vf else lower
        raise InfeasibleVolumeError(
            f"volume {vf} unreachable within move limit {config.move_limit} "
            f"(reachable [{lower.mean():.4f}, {upper.mean():.4f}])"
        )
    base = np.maximum(x, _DENSITY_FLOOR)

    def step(lmid):
        return np.clip(base * np.sqrt(s / lmid), lower, upper)

    lo = hi = float(np.median(s))
    for _ in range(4000):
        if step(lo).mean() >= vf - 0.5 * tol:
            break
        lo *= 0.5
    else:
        raise InfeasibleVolumeError("could not bracket the volume multiplier from below")
    for _ in range(4000):
        if step(hi).mean() <= vf + 0.5 * tol:
            break
        hi *= 2.0
    else:
        raise InfeasibleVolumeError("could not bracket the volume multiplier from above")
    x_new = step(lo)
    for _ in range(500):
        lmid = np.sqrt(lo * hi)
        x_new = step(lmid)
        vol = x_new.mean()
        if abs(vol - vf) <= 0.5 * tol:
            break
        if vol > vf:
            lo = lmid
        else:
            hi = lmid
        if hi / lo - 1 < 1e-15:
            break
    return x_new


def _iterate(problem, config, x, n_iters, early_stop):
    vf = problem.vf_target if config.vf_target is None else config.vf_target
    trace = OptimizationTrace()
    grid = problem.grid
    for _ in range(n_iters):
        u, c = fea.analyze(problem, x, config.penal, config.material, config.solver, config.solver_tol)
        dc = compliance_sensitivity(x, u, config, grid=grid)
        dc = filter_sensitivities(dc, x, config.filter_radius)
        x_new = oc_update(x, dc, config, vf_target=vf, clip_infeasible=True)
        change = float(np.abs(x_new - x).max())
        trace.compliances.append(c)
        trace.changes.append(change)
        x = x_new
        logger.debug("it %d c=%.5g vol=%.4f change=%.4f", trace.n_iters, c, x.mean(), change)
        if early_stop and change < config.change_tol:
            trace.converged = True
            break
    trace.density = x
    _, trace.final_compliance = fea.analyze(problem, x, config.penal, config.material, config.solver, config.solver_tol)
    return trace


def run_simp(problem, config=SimpConfig(), init=None):
    """Full SIMP run until ``max_iters`` or max density change below ``change_tol``."""
    vf = problem.vf_target if config.vf_target is None else config.vf_target
    if init is None:
        x = np.full(problem.grid.shape, vf)
    else:
        x = check_density(init, problem.grid, "init").copy()
    return _iterate(problem, config, x, config.max_iters, early_stop=True)


def refine(topology, problem, n_iters, config=SimpConfig()):
    """Exactly ``n_iters`` SIMP iterations from ``topology`` (no early stop)."""
    if int(n_iters) != n_iters or n_iters < 0:
        raise InvalidInputError("n_iters must be a non-negative integer")
    x = check_density(topology, problem.grid, "topology").copy()
    if n_iters == 0:
        trace = OptimizationTrace(density=x)
        _, trace.final_compliance = fea.analyze(problem, x, config.penal, config.material, config.solver, config.solver_tol)
        return trace
    return _iterate(problem, replace(config, max_iters=int(n_iters)), x, int(n_iters), early_stop=False)


class SIMPOptimizer(BaseEstimator):
    """Estimator wrapper around :func:`run_simp` / :func:`refine`.

    ``fit(problem)`` optimises from a uniform start (or ``init``) and stores
    ``density_``, ``compliance_`` and ``trace_``.
    """

    def __init__(
        self,
        penal=3.0,
        filter_radius=1.5,
        move_limit=0.2,
        max_iters=100,
        change_tol=0.01,
        bisection_tol=1e-4,
        young_void=1e-9,
        poisson=0.3,
        solver="pcg",
    ):
        self.penal = penal
        self.filter_radius = filter_radius
        self.move_limit = move_limit
        self.max_iters = max_iters
        self.change_tol = change_tol
        self.bisection_tol = bisection_tol
        self.young_void = young_void
        self.poisson = poisson
        self.solver = solver

    def _config(self):
        return SimpConfig(
            penal=self.penal,
            filter_radius=self.filter_radius,
            move_limit=self.move_limit,
            max_iters=self.max_iters,
            bisection_tol=self.bisection_tol,
            change_tol=self.change_tol,
            solver=self.solver,
            material=Material(1.0, self.young_void, self.poisson),
        )

    def fit(self, problem, init=None):
        self.trace_ = run_simp(problem, self._config(), init)
        self.density_ = self.trace_.density
        self.compliance_ = self.trace_.final_compliance
        self.n_iter_ = self.trace_.n_iters
        return self

    def refine(self, topology, problem, n_iters=10):
        return refine(topology, problem, n_iters, self._config()).density

    def score(self, problem, density=None):
        """Negative compliance of ``density`` (or the fitted design)."""
        if density is None:
            check_is_fitted(self, "density_")
            density = self.density_
        cfg = self._config()
        _, c = fea.analyze(problem, density, cfg.penal, cfg.material, cfg.solver)
        return -c
