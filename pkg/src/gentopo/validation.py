"""Input validation helpers used at public entry points."""

import numpy as np

from .exceptions import InvalidInputError


def check_density(density, grid, name="density"):
    """Return ``density`` as a float ``(nely, nelx)`` array with values in [0, 1]."""
    x = np.asarray(density, dtype=float)
    if x.shape != grid.shape:
        if x.size == grid.n_elements and x.ndim == 1:
            x = x.reshape(grid.shape, order="F")
        else:
            raise InvalidInputError(f"{name} has shape {x.shape}, expected {grid.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite values")
    if x.min() < 0 or x.max() > 1:
        raise InvalidInputError(f"{name} values must lie in [0, 1]")
    return x


def check_displacement(u, grid):
    u = np.asarray(u, dtype=float)
    if u.shape != (grid.n_dofs,):
        raise InvalidInputError(f"displacement has shape {u.shape}, expected ({grid.n_dofs},)")
    return u


def check_grid_array(a, shape, name="array"):
    a = np.asarray(a, dtype=float)
    if a.shape != tuple(shape):
        raise InvalidInputError(f"{name} has shape {a.shape}, expected {tuple(shape)}")
    return a


def check_positive_int(value, name, minimum=1):
    if int(value) != value or value < minimum:
        raise InvalidInputError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_finite(a, name="array"):
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return a
