"""Closed-form kernel relaxation of loads and supports, and conditioning stacks.

Loads act as sources and supports as sinks. For a source with force
magnitude ``p`` at distance ``r``::

    green_exp : p * (1 - exp(-alpha / r**beta))
    inv_r*    : p * min(1, 1 / r**k)          k = 1, 2, 4 or beta

Support kernels use the complementary profile (``exp(-alpha / r**beta)``
for ``green_exp``, ``1 - min(1, 1/r**k)`` otherwise): zero on the support,
approaching 1 far from it. Distances are in element units from element
centroids, floored at ``r_floor`` to regularise the source point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin

from . import fea
from .exceptions import InvalidConfigurationError, InvalidInputError
from .problem import Material

KERNEL_VARIANTS = ("green_exp", "inv_r", "inv_r2", "inv_r4", "inv_r_beta")
_INV_POWER = {"inv_r": 1.0, "inv_r2": 2.0, "inv_r4": 4.0}

BASE_CHANNELS = ("vf", "load_x", "load_y", "bc_mask")
KERNEL_CHANNELS = ("kernel_load", "kernel_bc")
FIELD_CHANNELS = ("field_vm", "field_energy")

# Channel layout per model variant (loads, BCs and VF always; fields or kernels).
VARIANT_CHANNELS = {
    "topodiff": BASE_CHANNELS + FIELD_CHANNELS,
    "topodiff-guided": BASE_CHANNELS + FIELD_CHANNELS,
    "topodiff-ff": BASE_CHANNELS + KERNEL_CHANNELS,
    "topodiff-ff-simp": BASE_CHANNELS + KERNEL_CHANNELS,
}


@dataclass(frozen=True)
class KernelParams:
    alpha: float = 10.0
    beta: float = 2.0
    variant: str = "green_exp"
    r_floor: float = 0.5

    def __post_init__(self):
        if self.variant not in KERNEL_VARIANTS:
            raise InvalidInputError(f"unknown kernel variant {self.variant!r}")
        if self.alpha <= 0 or self.beta <= 0:
            raise InvalidInputError("alpha and beta must be positive")
        if self.r_floor <= 0:
            raise InvalidInputError("r_floor must be positive")

    @property
    def power(self):
        return _INV_POWER.get(self.variant, self.beta)


def greens_function(x, x_prime):
    """Free-space Green's function ``-1 / (4 pi |x - x'|)``; ``-inf`` at coincident points."""
    r = np.linalg.norm(np.asarray(x, float) - np.asarray(x_prime, float), axis=-1)
    with np.errstate(divide="ignore"):
        return -1.0 / (4 * np.pi * r)


def distance_grid(grid, point):
    """Euclidean distance from every element centroid to ``point`` = (column, row)."""
    px, py = float(point[0]), float(point[1])
    if not (0 <= px <= grid.nelx and 0 <= py <= grid.nely):
        raise InvalidInputError(f"point {point} outside grid bounds")
    cx, cy = grid.element_centroids()
    return np.hypot(cx - px, cy - py)


def load_profile(r, params=KernelParams()):
    """Unit-magnitude source kernel as a function of distance."""
    r = np.maximum(np.asarray(r, dtype=float), params.r_floor)
    if params.variant == "green_exp":
        return -np.expm1(-params.alpha / r**params.beta)
    return np.minimum(1.0, 1.0 / r**params.power)


def bc_profile(r, params=KernelParams()):
    """Sink kernel as a function of distance: ~0 at the support, -> 1 far away."""
    r = np.maximum(np.asarray(r, dtype=float), params.r_floor)
    if params.variant == "green_exp":
        return np.exp(-params.alpha / r**params.beta)
    return 1.0 - np.minimum(1.0, 1.0 / r**params.power)


def load_kernel(grid, point, magnitude, params=KernelParams()):
    return float(magnitude) * load_profile(distance_grid(grid, point), params)


def bc_kernel(grid, bc_points, params=KernelParams()):
    """Elementwise minimum of per-point sink kernels (nearest support dominates)."""
    pts = np.atleast_2d(np.asarray(bc_points, dtype=float))
    if pts.size == 0:
        raise InvalidInputError("bc_kernel needs at least one point")
    cx, cy = grid.element_centroids()
    # the profile is monotone in r, so min over kernels == kernel of the min distance
    r, _ = cKDTree(pts[:, :2]).query(np.column_stack([cx.ravel(), cy.ravel()]))
    return bc_profile(r.reshape(grid.shape), params)


def superpose_loads(grid, loads, params=KernelParams()):
    """Sum of per-load kernels weighted by force magnitude, rescaled to peak 1."""
    if len(loads.nodes) == 0:
        raise InvalidInputError("superpose_loads needs at least one load")
    pts = grid.node_position(loads.nodes)
    cx, cy = grid.element_centroids()
    r = np.hypot(cx[None] - pts[:, 0, None, None], cy[None] - pts[:, 1, None, None])
    total = np.tensordot(loads.magnitudes, load_profile(r, params), axes=1)
    peak = total.max()
    return total / peak if peak > 0 else total


def _node_impulses(grid, nodes, values):
    """Spread per-node values evenly over the elements touching each node."""
    out = np.zeros(grid.n_elements)
    for node, v in zip(nodes, values):
        adj = grid.elements_adjacent_to_node(node)
        out[adj] += v / len(adj)
    return out.reshape(grid.shape)


def base_channels(problem):
    grid = problem.grid
    vf = np.full(grid.shape, float(problem.vf_target))
    load_x = _node_impulses(grid, problem.loads.nodes, problem.loads.forces[:, 0])
    load_y = _node_impulses(grid, problem.loads.nodes, problem.loads.forces[:, 1])
    # node grid indexed (row, column); an element is marked if any corner node is fixed
    fixed = np.zeros(grid.n_nodes, dtype=bool)
    fixed[problem.bcs.fixed_nodes] = True
    fixed = fixed.reshape(grid.nelx + 1, grid.nely + 1).T
    bc = fixed[:-1, :-1] | fixed[1:, :-1] | fixed[:-1, 1:] | fixed[1:, 1:]
    return {"vf": vf, "load_x": load_x, "load_y": load_y, "bc_mask": bc.astype(float)}


def kernel_channels(problem, params=KernelParams()):
    grid = problem.grid
    kl = superpose_loads(grid, problem.loads, params)
    kb = bc_kernel(grid, grid.node_position(problem.bcs.fixed_nodes), params)
    peak = kb.max()
    return {"kernel_load": kl, "kernel_bc": kb / peak if peak > 0 else kb}


def compute_fields(problem, material=Material(), penal=3.0, method="pcg"):
    """FEA fields on the solid domain, the expensive conditioning of field-based variants."""
    density = np.ones(problem.grid.shape)
    k = fea.assemble_stiffness(density, penal, material, problem.grid)
    u = fea.solve_displacement(k, problem.loads, problem.bcs, problem.grid, method=method)
    return fea.stress_energy_fields(u, density, material, problem.grid, penal)


@dataclass(frozen=True)
class ConditioningStack:
    names: tuple
    data: np.ndarray  # (channels, nely, nelx)

    def __getitem__(self, name):
        return self.data[self.names.index(name)]

    @property
    def shape(self):
        return self.data.shape[1:]


def channel_names(variant):
    try:
        return VARIANT_CHANNELS[variant]
    except KeyError:
        raise InvalidConfigurationError(f"unknown model variant {variant!r}") from None


def build_stack(problem, variant="topodiff-ff", fields=None, params=KernelParams()):
    """Conditioning channels for ``variant``; field variants need a :class:`FieldPair`."""
    names = channel_names(variant)
    chans = base_channels(problem)
    if "kernel_load" in names:
        chans.update(kernel_channels(problem, params))
    if "field_vm" in names:
        if fields is None:
            raise InvalidConfigurationError(f"variant {variant!r} requires stress/energy fields")
        for key, arr in (("field_vm", fields.von_mises), ("field_energy", fields.strain_energy)):
            peak = arr.max()
            chans[key] = arr / peak if peak > 0 else np.zeros_like(arr)
    return ConditioningStack(names, np.stack([chans[n] for n in names]))


class KernelConditioner(TransformerMixin, BaseEstimator):
    """Maps a sequence of :class:`ProblemSpec` to ``(n, channels, nely, nelx)`` arrays.

    Field variants run one FEA solve per problem inside ``transform``.
    """

    def __init__(self, variant="topodiff-ff", kernel="green_exp", alpha=10.0, beta=2.0, r_floor=0.5):
        self.variant = variant
        self.kernel = kernel
        self.alpha = alpha
        self.beta = beta
        self.r_floor = r_floor

    def _params(self):
        return KernelParams(self.alpha, self.beta, self.kernel, self.r_floor)

    def fit(self, problems=None, y=None):
        self._params()
        self.channel_names_ = channel_names(self.variant)
        self.n_channels_ = len(self.channel_names_)
        return self

    def transform(self, problems):
        params = self._params()
        names = channel_names(self.variant)
        out = []
        for problem in problems:
            fields = compute_fields(problem) if "field_vm" in names else None
            out.append(build_stack(problem, self.variant, fields, params).data)
        return np.stack(out)
