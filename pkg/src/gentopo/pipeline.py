"""Generate -> refine -> evaluate workflows and the benchmark harness."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fea
from .exceptions import EmptySplitError, GentopoError, InvalidInputError
from .guidance import ComplianceOracle, Guidance, fm_guidance
from .kernels import KernelParams, build_stack, channel_names, compute_fields
from .metrics import SUMMARY_COLUMNS, TaskSplit, aggregate, evaluate_topology
from .simp import SimpConfig, refine, run_simp

logger = logging.getLogger(__name__)

VARIANTS = ("topodiff", "topodiff-guided", "topodiff-ff", "topodiff-ff-simp")
WORKERS_ENV = "GENTOPO_WORKERS"


def timed(fn, repeats=1):
    """Run ``fn`` ``repeats`` times; return its first result and the median wall time."""
    times, result = [], None
    for i in range(max(1, repeats)):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
        if i == 0:
            result = out
    return result, float(np.median(times))


@dataclass
class RunManifest:
    variant: str
    steps: int
    refine_iters: int
    guidance: dict
    kernel: dict
    seeds: list
    timings: dict = field(default_factory=dict)
    checkpoint_sha256: str | None = None
    dataset_sha256: str | None = None

    def to_dict(self):
        return asdict(self)


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dataset_digest(records):
    h = hashlib.sha256()
    for problem, topo in records:
        h.update(json.dumps(problem.to_dict(), sort_keys=True).encode())
        h.update(np.ascontiguousarray(topo, dtype="<f8").tobytes())
    return h.hexdigest()


def conditioning_for(problem, variant, params=KernelParams()):
    """Conditioning stack for ``variant``; field variants run an FEA solve here."""
    fields = compute_fields(problem) if "field_vm" in channel_names(variant) else None
    return build_stack(problem, variant, fields, params)


def default_guidance(variant, problem, scale_fm=0.0, scale_c=0.0):
    """Oracle guidance for the guided variant; scales default to 0 (off)."""
    if variant != "topodiff-guided" or (scale_fm == 0 and scale_c == 0):
        return None
    return Guidance(fm=fm_guidance, compliance=ComplianceOracle([problem]), scale_fm=scale_fm, scale_c=scale_c)


@dataclass
class GenerationResult:
    raw: np.ndarray
    refined: np.ndarray
    raw_record: object
    refined_record: object
    timings: dict
    error: str | None = None


# Generated designs are near-binary (stiffness contrast ~1e9), where Jacobi PCG
# stalls; sparse LU is exact and orders of magnitude faster there.
EVAL_CONFIG = SimpConfig(solver="direct")


def evaluate_compliance(problem, topology, config=EVAL_CONFIG):
    _, c = fea.analyze(problem, topology, config.penal, config.material, config.solver, config.solver_tol)
    return c


def baseline_compliance(problem, config=SimpConfig()):
    if problem.optimal_compliance is not None:
        return float(problem.optimal_compliance)
    return float(run_simp(problem, config).final_compliance)


def generate_and_refine(
    problem,
    model,
    steps=100,
    refine_iters=10,
    seed=0,
    variant=None,
    kernel_params=KernelParams(),
    guidance=None,
    config=EVAL_CONFIG,
    timing_repeats=3,
):
    """Condition -> sample -> refine with exactly ``refine_iters`` SIMP steps -> evaluate both.

    ``processing`` covers stack construction (including FEA for field
    variants) plus refinement; ``sampling`` covers the reverse chain.
    """
    variant = variant or model.variant
    names = channel_names(variant)
    if tuple(getattr(model, "channel_names_", names)) != tuple(names):
        raise InvalidInputError(f"checkpoint channels {model.channel_names_} do not match variant {variant!r}")
    stack, t_proc = timed(lambda: conditioning_for(problem, variant, kernel_params), timing_repeats)
    cond = stack.data[None]
    raw, t_samp = timed(lambda: model.sample(cond, steps=steps, seed=seed, guidance=guidance)[0], timing_repeats)
    c_opt = baseline_compliance(problem, config)
    raw_rec = evaluate_topology(
        raw, problem, evaluate_compliance(problem, raw, config), c_opt,
        sampling_s=t_samp, processing_s=t_proc, seed=seed,
    )
    timings = {"processing_s": t_proc, "sampling_s": t_samp, "refine_s": 0.0}
    error = None
    refined, t_ref = raw, 0.0
    if refine_iters:
        try:
            trace, t_ref = timed(lambda: refine(raw, problem, refine_iters, config), timing_repeats)
            refined = trace.density
        except GentopoError as exc:
            logger.warning("refinement failed for %s: %s", problem.name, exc)
            error = str(exc)
    timings["refine_s"] = t_ref
    ref_rec = evaluate_topology(
        refined, problem, evaluate_compliance(problem, refined, config), c_opt,
        sampling_s=t_samp, processing_s=t_proc + t_ref, seed=seed,
    )
    timings["inference_s"] = ref_rec.inference_s
    return GenerationResult(raw, refined, raw_rec, ref_rec, timings, error)


def unique_path(path):
    """``path`` if free, else ``stem_1.ext``, ``stem_2.ext``, ... (reports are never overwritten)."""
    path = Path(path)
    if not path.exists():
        return path
    i = 1
    while True:
        cand = path.with_name(f"{path.stem}_{i}{path.suffix}")
        if not cand.exists():
            return cand
        i += 1


def _variant_labels(variant, scales=(0.0, 0.0)):
    constraints = "FIELD" if "field_vm" in channel_names(variant) else "KERNEL"
    guidance = "ORACLE" if variant == "topodiff-guided" and any(scales) else "COND"
    return constraints, guidance


def _generate_one(args):
    problem, model, variant, steps, refine_iters, seed, kernel_params, scales, timing_repeats = args
    guidance = default_guidance(variant, problem, *scales)
    res = generate_and_refine(
        problem, model, steps, refine_iters, seed, variant, kernel_params, guidance, timing_repeats=timing_repeats
    )
    rec = res.refined_record if refine_iters else res.raw_record
    return problem.name, rec


def _records_for(model, variant, problems, steps, refine_iters, seed, kernel_params, scales, workers, timing_repeats):
    jobs = [(p, model, variant, steps, refine_iters, seed, kernel_params, scales, timing_repeats) for p in problems]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_generate_one, jobs))
    else:
        out = [_generate_one(j) for j in jobs]
    return [rec for _, rec in sorted(out, key=lambda item: item[0])]


BENCH_COLUMNS = ("model", "task", "steps", "constraints", "guidance", "n_runs", "n") + tuple(
    c for col in SUMMARY_COLUMNS for c in (col, f"{col}_std")
) + ("status",)


def run_benchmark(
    dataset,
    models,
    splits=("task-1",),
    seeds=(0,),
    steps=100,
    refine_iters=10,
    out_dir=None,
    kernel_params=KernelParams(),
    guidance_scales=(0.0, 0.0),
    workers=None,
    timing_repeats=1,
):
    """Evaluate every variant on every split, averaging over ``seeds``.

    ``dataset`` is a list of ``(problem, topology)`` pairs used for all splits,
    or a dict keyed by split name. ``models`` maps variant names to fitted
    :class:`DiffusionModel` objects or checkpoint paths; ``None`` or a missing
    path skips the variant with a ``missing-checkpoint`` row. Returns
    ``(rows, records)``; writes CSV/JSON/manifest files when ``out_dir`` is set.
    """
    from .model import DiffusionModel

    if not models or not splits:
        raise InvalidInputError("need at least one variant and one split")
    workers = int(os.environ.get(WORKERS_ENV, "1")) if workers is None else workers
    rows, all_records, manifests = [], {}, []
    cache = {}
    for variant, model in models.items():
        if variant not in VARIANTS:
            raise InvalidInputError(f"unknown variant {variant!r}")
        ckpt_hash = None
        if isinstance(model, (str, os.PathLike)):
            if not Path(model).exists():
                model = None
            else:
                ckpt_hash = sha256_file(model)
                model = DiffusionModel.load(model)
        constraints, guidance_label = _variant_labels(variant, guidance_scales)
        n_ref = refine_iters if variant == "topodiff-ff-simp" else 0
        for split_name in splits:
            split = TaskSplit.named(split_name)
            row = {"model": variant, "task": split_name, "steps": steps, "constraints": constraints,
                   "guidance": guidance_label}
            if model is None:
                rows.append({**row, "status": "missing-checkpoint"})
                continue
            data = dataset[split_name] if isinstance(dataset, dict) else dataset
            problems = [p for p, _ in data]
            per_seed = []
            for seed in seeds:
                key = (variant, id(data), seed)
                if key not in cache:
                    cache[key] = _records_for(
                        model, variant, problems, steps, n_ref, seed, kernel_params, guidance_scales, workers,
                        timing_repeats,
                    )
                recs = cache[key]
                all_records.setdefault(f"{variant}/{split_name}/{seed}", [r.to_dict() for r in recs])
                try:
                    per_seed.append(aggregate(recs, split))
                except EmptySplitError:
                    pass
            if not per_seed:
                rows.append({**row, "status": "empty-split"})
                continue
            row.update({"n_runs": len(per_seed), "n": int(np.mean([s.n for s in per_seed])), "status": "ok"})
            for col in SUMMARY_COLUMNS:
                vals = np.array([getattr(s, col) for s in per_seed], dtype=float)
                row[col] = float(np.mean(vals))
                row[f"{col}_std"] = float(np.std(vals))
            rows.append(row)
        manifests.append(
            RunManifest(
                variant, steps, n_ref, {"scale_fm": guidance_scales[0], "scale_c": guidance_scales[1]},
                asdict(kernel_params), list(seeds), checkpoint_sha256=ckpt_hash,
                dataset_sha256=dataset_digest(dataset if not isinstance(dataset, dict) else
                                              [r for v in dataset.values() for r in v]),
            ).to_dict()
        )
    if out_dir is not None:
        write_reports(out_dir, rows, all_records, manifests)
    return rows, all_records


def write_reports(out_dir, rows, records, manifests):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = unique_path(out / "summary.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    unique_path(out / "records.json").write_text(json.dumps(records, indent=1, sort_keys=True, default=float))
    unique_path(out / "manifest.json").write_text(json.dumps(manifests, indent=2, sort_keys=True, default=str))
    return csv_path
