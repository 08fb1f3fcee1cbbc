"""Guidance providers that shift the reverse-process mean.

Providers are callables ``provider(z_t, t, cond, x0_hat) -> (field, diagnostic)``
acting on a single sample (``z_t`` and ``x0_hat`` of shape ``(H, W)``,
``cond`` of shape ``(C, H, W)``). Fields are bounded by 1 in magnitude.

The oracle providers work directly on the denoised estimate (connectivity
analysis and FEA) rather than on trained surrogate networks.
"""

from __future__ import annotations

import inspect
import logging
from dataclasses import replace

import numpy as np

from . import fea
from .diffusion import GuidanceTerms
from .exceptions import GentopoError, InvalidInputError
from .io import load_tensors
from .kernels import BASE_CHANNELS
from .metrics import THRESHOLD, floating_mask
from .simp import SimpConfig, compliance_sensitivity, filter_sensitivities, oc_update

logger = logging.getLogger(__name__)

GUIDANCE_KINDS = ("none", "fm_oracle", "compliance_oracle", "external")


def no_guidance(z_t, t, cond, x0_hat):
    return np.zeros_like(np.asarray(z_t, dtype=float)), 0.0


def anchors_from_conditioning(cond, names=BASE_CHANNELS):
    """Elements carrying a load or a support, read back from the conditioning channels."""
    cond = np.asarray(cond)
    get = lambda n: cond[list(names).index(n)]  # noqa: E731
    return (get("bc_mask") > 0) | (get("load_x") != 0) | (get("load_y") != 0)


def fm_score(x, anchors, connectivity=8, temperature=0.1):
    """Soft amount of floating material: sigmoid-relaxed density summed over unanchored components."""
    floating = floating_mask(x >= THRESHOLD, anchors, connectivity)
    if not floating.any():
        return 0.0
    soft = 1.0 / (1.0 + np.exp(-(x[floating] - THRESHOLD) / temperature))
    return float(soft.sum())


def fm_guidance(z_t, t, cond, x0_hat, *, anchors=None, block=None, delta=0.05, connectivity=8):
    """Probe-based finite-difference descent direction of :func:`fm_score`.

    The grid is tiled into ``block x block`` probes; each probe's density is
    nudged by ``+-delta`` and the central difference of the score is written
    back onto the probe's elements, negated and scaled to unit max magnitude.
    """
    x = np.clip(np.asarray(x0_hat, dtype=float), 0.0, 1.0)
    if anchors is None:
        anchors = anchors_from_conditioning(cond)
    base = fm_score(x, anchors, connectivity)
    field = np.zeros_like(x)
    if base == 0.0:
        return field, 0.0
    h, w = x.shape
    block = block or max(1, min(h, w) // 16)
    for i in range(0, h, block):
        for j in range(0, w, block):
            sl = (slice(i, i + block), slice(j, j + block))
            xp = x.copy()
            xp[sl] = np.clip(xp[sl] + delta, 0.0, 1.0)
            xm = x.copy()
            xm[sl] = np.clip(xm[sl] - delta, 0.0, 1.0)
            field[sl] = -(fm_score(xp, anchors, connectivity) - fm_score(xm, anchors, connectivity)) / (2 * delta)
    peak = np.abs(field).max()
    if peak > 0:
        field /= peak
    return field, base


def compliance_guidance(z_t, t, cond, x0_hat, problem, config=SimpConfig()):
    """Volume-preserving optimality-criteria step direction at the denoised estimate.

    The field is ``(x_oc - x) / move_limit``: positive where adding material
    lowers compliance more than the volume multiplier allows elsewhere, and
    close to zero at a converged SIMP design. Returns the compliance of the
    estimate as the diagnostic. FEA failures give a zero field.
    """
    x = np.clip(np.asarray(x0_hat, dtype=float), 0.0, 1.0)
    try:
        u, c = fea.analyze(problem, x, config.penal, config.material, config.solver, config.solver_tol)
        dc = compliance_sensitivity(x, u, config, grid=problem.grid)
        dc = filter_sensitivities(dc, x, config.filter_radius)
        move = config.move_limit
        try:
            x_new = oc_update(x, dc, config, vf_target=problem.vf_target)
        except GentopoError:
            move = 1.0
            x_new = oc_update(x, dc, replace(config, move_limit=1.0), vf_target=problem.vf_target)
    except GentopoError as exc:
        logger.warning("compliance guidance disabled for this step: %s", exc)
        return np.zeros_like(x), float("nan")
    return (x_new - x) / move, c


class ComplianceOracle:
    """Binds :func:`compliance_guidance` to one problem per batch entry."""

    def __init__(self, problems, config=SimpConfig()):
        self.problems = list(problems) if isinstance(problems, (list, tuple)) else [problems]
        self.config = config

    def __call__(self, z_t, t, cond, x0_hat, index=0):
        problem = self.problems[index if len(self.problems) > 1 else 0]
        return compliance_guidance(z_t, t, cond, x0_hat, problem, self.config)


class ExternalGuidance:
    """Linear surrogate loaded from a tensor container (tensors ``weight`` and optional ``bias``).

    The surrogate scores ``s(x) = <weight, x> + bias``; the field is the
    normalised descent direction ``-weight / max|weight|``.
    """

    def __init__(self, path):
        tensors, self.meta = load_tensors(path)
        if "weight" not in tensors:
            raise InvalidInputError("external guidance checkpoint needs a 'weight' tensor")
        self.weight = tensors["weight"].astype(float)
        self.bias = float(tensors["bias"].ravel()[0]) if "bias" in tensors else 0.0

    def __call__(self, z_t, t, cond, x0_hat, index=0):
        if self.weight.shape != np.shape(x0_hat):
            raise InvalidInputError("external guidance weight shape does not match latent")
        score = float(np.sum(self.weight * x0_hat) + self.bias)
        peak = np.abs(self.weight).max()
        return (-self.weight / peak if peak > 0 else np.zeros_like(self.weight)), score


def _takes_index(provider):
    try:
        return "index" in inspect.signature(provider).parameters
    except (TypeError, ValueError):
        return False


class Guidance:
    """Combines an FM provider and a compliance provider with constant per-step weights."""

    def __init__(self, fm=None, compliance=None, scale_fm=0.0, scale_c=0.0):
        self.fm = fm
        self.compliance = compliance
        self.scale_fm = float(scale_fm)
        self.scale_c = float(scale_c)
        self.diagnostics = []

    @property
    def enabled(self):
        return (self.fm is not None and self.scale_fm != 0) or (self.compliance is not None and self.scale_c != 0)

    def _batch(self, provider, z_t, t, cond, x0_hat):
        fields, diags = [], []
        for i in range(len(z_t)):
            c_i = None if cond is None else np.asarray(cond)[i]
            kwargs = {"index": i} if _takes_index(provider) else {}
            f, d = provider(z_t[i], t, c_i, x0_hat[i], **kwargs)
            f = np.asarray(f, dtype=float)
            if f.shape != z_t[i].shape or not np.all(np.isfinite(f)):
                raise InvalidInputError("guidance field must match the latent shape and be finite")
            fields.append(f)
            diags.append(d)
        return np.stack(fields), diags

    def terms(self, z_t, t, cond, x0_hat):
        terms = GuidanceTerms(scale_c=self.scale_c, scale_fm=self.scale_fm)
        if not self.enabled:
            return terms
        if self.fm is not None and self.scale_fm != 0:
            terms.g_fm, d_fm = self._batch(self.fm, z_t, t, cond, x0_hat)
        else:
            d_fm = None
        if self.compliance is not None and self.scale_c != 0:
            terms.g_c, d_c = self._batch(self.compliance, z_t, t, cond, x0_hat)
        else:
            d_c = None
        self.diagnostics.append({"t": int(t), "fm": d_fm, "compliance": d_c})
        return terms


def make_guidance(kind, problems=None, scale=1.0, path=None, config=SimpConfig()):
    """Build a :class:`Guidance` for one provider kind."""
    if kind not in GUIDANCE_KINDS:
        raise InvalidInputError(f"unknown guidance kind {kind!r}")
    if kind == "none":
        return Guidance()
    if kind == "fm_oracle":
        return Guidance(fm=fm_guidance, scale_fm=scale)
    if kind == "compliance_oracle":
        if problems is None:
            raise InvalidInputError("compliance guidance needs the problem(s)")
        return Guidance(compliance=ComplianceOracle(problems, config), scale_c=scale)
    if path is None:
        raise InvalidInputError("external guidance needs a checkpoint path")
    return Guidance(compliance=ExternalGuidance(path), scale_c=scale)
