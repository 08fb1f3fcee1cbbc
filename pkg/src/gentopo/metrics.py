"""Design metrics and report aggregation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import EmptySplitError, InvalidBaselineError, InvalidInputError

THRESHOLD = 0.5
CDF_CUTOFFS = (10, 25, 50, 100)

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def binarize(topology, threshold=THRESHOLD):
    return np.asarray(topology, dtype=float) >= threshold


def volume_fraction_error(topology, vf_target, threshold=THRESHOLD):
    """Percent deviation of the (thresholded) material fraction from ``vf_target``.

    ``threshold=None`` measures the continuous mean density instead.
    """
    if vf_target <= 0:
        raise InvalidInputError("vf_target must be positive")
    x = np.asarray(topology, dtype=float)
    vol = x.mean() if threshold is None else binarize(x, threshold).mean()
    return 100.0 * abs(vol - vf_target) / vf_target


def compliance_error(c_gen, c_opt):
    """Signed percent deviation of ``c_gen`` from the optimised baseline ``c_opt``."""
    if not c_opt > 0:
        raise InvalidBaselineError(f"baseline compliance must be positive, got {c_opt}")
    return 100.0 * (c_gen - c_opt) / c_opt


def anchor_mask(grid, nodes):
    """Boolean ``(nely, nelx)`` mask of elements touching any of ``nodes``."""
    mask = np.zeros(grid.n_elements, dtype=bool)
    for node in np.atleast_1d(nodes):
        mask[grid.elements_adjacent_to_node(int(node))] = True
    return mask.reshape(grid.shape)


def floating_mask(solid, anchors, connectivity=8):
    """Solid elements belonging to components that contain no anchor element."""
    if connectivity not in _STRUCTURES:
        raise InvalidInputError("connectivity must be 4 or 8")
    labels, n = ndimage.label(solid, structure=_STRUCTURES[connectivity])
    if n == 0:
        return np.zeros_like(solid, dtype=bool)
    anchored = np.unique(labels[anchors & solid])
    return (labels > 0) & ~np.isin(labels, anchored)


def floating_material(topology, loads, bcs, grid=None, connectivity=8, threshold=THRESHOLD):
    """True iff some material component touches neither a load nor a support."""
    x = np.asarray(topology, dtype=float)
    if grid is None:
        from .problem import Grid

        grid = Grid(x.shape[1], x.shape[0])
    anchors = anchor_mask(grid, np.concatenate([loads.nodes, bcs.fixed_nodes]))
    return bool(floating_mask(binarize(x, threshold), anchors, connectivity).any())


def load_disrespect(topology, loads, grid=None, threshold=THRESHOLD):
    """True iff some load node has no solid element next to it."""
    x = np.asarray(topology, dtype=float)
    if grid is None:
        from .problem import Grid

        grid = Grid(x.shape[1], x.shape[0])
    solid = binarize(x, threshold).ravel()
    return any(not solid[grid.elements_adjacent_to_node(int(n))].any() for n in loads.nodes)


@dataclass
class EvaluationRecord:
    compliance: float
    compliance_opt: float | None = None
    ce_percent: float = math.nan
    vfe_percent: float = math.nan
    fm: bool = False
    ld: bool = False
    sampling_s: float = 0.0
    processing_s: float = 0.0
    inference_s: float = field(default=None)
    problem_id: str = ""
    seed: int = 0

    def __post_init__(self):
        total = self.sampling_s + self.processing_s
        if self.inference_s is None:
            self.inference_s = total
        elif not math.isclose(self.inference_s, total, rel_tol=1e-12, abs_tol=1e-15):
            raise InvalidInputError("inference_s must equal sampling_s + processing_s")
        if self.compliance_opt is not None and self.compliance_opt > 0 and math.isnan(self.ce_percent):
            self.ce_percent = compliance_error(self.compliance, self.compliance_opt)

    def to_dict(self):
        return asdict(self)


def evaluate_topology(topology, problem, compliance_value, compliance_opt=None, **timings):
    return EvaluationRecord(
        compliance=float(compliance_value),
        compliance_opt=compliance_opt if compliance_opt is not None else problem.optimal_compliance,
        vfe_percent=volume_fraction_error(topology, problem.vf_target),
        fm=floating_material(topology, problem.loads, problem.bcs, problem.grid),
        ld=load_disrespect(topology, problem.loads, problem.grid),
        problem_id=problem.name,
        **timings,
    )


def manufacturable(record, cutoff=100.0):
    return (not record.fm) and (not record.ld) and record.compliance < cutoff


def compliance_cdf(records, cutoffs=CDF_CUTOFFS):
    """Fraction of records with compliance <= each cutoff."""
    c = np.array([r.compliance if isinstance(r, EvaluationRecord) else float(r) for r in records])
    if c.size == 0:
        raise InvalidInputError("compliance_cdf needs at least one record")
    return [float(np.mean(c <= cut)) for cut in cutoffs]


@dataclass(frozen=True)
class TaskSplit:
    name: str
    filter_high_compliance: bool = True
    compliance_cutoff: float = 100.0

    @classmethod
    def named(cls, name):
        if name in ("task-1", "task-2"):
            return cls(name, True, 100.0)
        if name == "task-3":
            return cls(name, False, 100.0)
        raise InvalidInputError(f"unknown task split {name!r}")

    def apply(self, records):
        if not self.filter_high_compliance:
            return list(records)
        return [r for r in records if r.compliance <= self.compliance_cutoff]


SUMMARY_COLUMNS = (
    "avg_c",
    "mdn_c",
    "ce_percent",
    "vfe_percent",
    "fm_percent",
    "sampling_s",
    "processing_s",
    "inference_s",
)


@dataclass
class Summary:
    n: int
    avg_c: float
    mdn_c: float
    ce_percent: float
    mdn_ce_percent: float
    vfe_percent: float
    fm_percent: float
    ld_percent: float
    manufacturable_percent: float
    sampling_s: float
    processing_s: float
    inference_s: float

    def to_dict(self):
        return asdict(self)


def aggregate(records, split=TaskSplit("task-3", False)):
    """Means/medians over the records that survive ``split``'s filter."""
    kept = split.apply(records)
    if not kept:
        raise EmptySplitError(f"no records left after filtering for {split.name}")
    c = np.array([r.compliance for r in kept])
    ce = np.array([r.ce_percent for r in kept], dtype=float)
    ce_ok = ce[np.isfinite(ce)]
    return Summary(
        n=len(kept),
        avg_c=float(c.mean()),
        mdn_c=float(np.median(c)),
        ce_percent=float(ce_ok.mean()) if ce_ok.size else math.nan,
        mdn_ce_percent=float(np.median(ce_ok)) if ce_ok.size else math.nan,
        vfe_percent=float(np.mean([r.vfe_percent for r in kept])),
        fm_percent=100.0 * float(np.mean([r.fm for r in kept])),
        ld_percent=100.0 * float(np.mean([r.ld for r in kept])),
        manufacturable_percent=100.0 * float(np.mean([manufacturable(r) for r in kept])),
        sampling_s=float(np.mean([r.sampling_s for r in kept])),
        processing_s=float(np.mean([r.processing_s for r in kept])),
        inference_s=float(np.mean([r.inference_s for r in kept])),
    )


_GAP_AVG = ("avg_c", "ce_percent", "vfe_percent", "fm_percent", "processing_s", "inference_s")
_GAP_MDN = ("mdn_c", "mdn_ce_percent", "vfe_percent", "fm_percent", "processing_s", "inference_s")


def _minmax(col):
    col = np.asarray(col, dtype=float)
    span = col.max() - col.min()
    return np.zeros_like(col) if span == 0 else (col - col.min()) / span


def design_gap(summaries, median=False):
    """Mean of min-max normalised metric columns per model (0 = best on every metric).

    Normalisation is across the compared models, so the values are only
    meaningful relative to each other.
    """
    keys = _GAP_MDN if median else _GAP_AVG
    cols = np.array([[abs(getattr(s, k)) for k in keys] for s in summaries])
    return np.column_stack([_minmax(cols[:, j]) for j in range(cols.shape[1])]).mean(axis=1)


def average_rank(summaries, keys=_GAP_AVG):
    """Mean per-metric rank (1 = best, ties share the lower rank)."""
    from scipy.stats import rankdata

    cols = np.array([[abs(getattr(s, k)) for k in keys] for s in summaries])
    ranks = np.column_stack([rankdata(cols[:, j], method="min") for j in range(cols.shape[1])])
    return ranks.mean(axis=1)
