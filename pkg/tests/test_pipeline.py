import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from gentopo.exceptions import InfeasibleVolumeError, InvalidInputError
from gentopo.io import synth_dataset
from gentopo.kernels import KernelConditioner
from gentopo.metrics import EvaluationRecord
from gentopo.model import DiffusionModel
from gentopo.pipeline import (
    BENCH_COLUMNS,
    dataset_digest,
    generate_and_refine,
    run_benchmark,
    timed,
    unique_path,
)
from gentopo.problem import cantilever


def _untrained(variant="topodiff-ff", n=16):
    return DiffusionModel.untrained(variant, (n, n), T=100, sample_steps=10)


def test_refine_zero_gives_raw(cantilever16):
    res = generate_and_refine(cantilever16, _untrained(), steps=5, refine_iters=0, timing_repeats=1)
    assert np.array_equal(res.raw, res.refined)
    assert res.timings["refine_s"] == 0.0
    for rec in (res.raw_record, res.refined_record):
        assert rec.inference_s == pytest.approx(rec.sampling_s + rec.processing_s)


def test_far_off_volume_sample_still_refines(cantilever16, monkeypatch):
    # a sample far from the volume target; refinement closes the gap at the move limit
    model = _untrained()
    monkeypatch.setattr(model, "sample", lambda C, steps=None, seed=None, guidance=None: np.ones((1, 16, 16)))
    res = generate_and_refine(cantilever16, model, steps=5, refine_iters=10, timing_repeats=1)
    assert res.error is None
    assert res.refined.mean() == pytest.approx(0.4, abs=1e-3)


def test_refine_failure_keeps_partial_result(cantilever16, monkeypatch):
    import gentopo.pipeline as pipeline

    def boom(*args, **kwargs):
        raise InfeasibleVolumeError("volume unreachable")

    monkeypatch.setattr(pipeline, "refine", boom)
    res = generate_and_refine(cantilever16, _untrained(), steps=5, refine_iters=3, timing_repeats=1)
    assert res.error == "volume unreachable"
    assert np.array_equal(res.refined, res.raw)
    assert res.refined_record.compliance == res.raw_record.compliance > 0


def test_refine_improves_near_optimal_sample(cantilever16, monkeypatch):
    model = _untrained()
    from gentopo.simp import SimpConfig, run_simp

    opt = run_simp(cantilever16, SimpConfig(max_iters=60)).density
    noisy = np.clip(opt + np.random.default_rng(0).normal(0, 0.15, opt.shape), 0, 1)
    monkeypatch.setattr(model, "sample", lambda C, steps=None, seed=None, guidance=None: noisy[None])
    res = generate_and_refine(cantilever16, model, steps=5, refine_iters=10, timing_repeats=1)
    assert res.error is None
    assert res.refined_record.compliance < res.raw_record.compliance
    assert res.refined_record.processing_s >= res.raw_record.processing_s


def test_channel_mismatch_rejected(cantilever16):
    with pytest.raises(InvalidInputError):
        generate_and_refine(cantilever16, _untrained("topodiff"), variant="topodiff-ff", steps=2, timing_repeats=1)


def test_kernel_processing_much_cheaper_than_fields():
    # a supplied baseline skips the 64x64 SIMP run that would otherwise compute CE
    p = replace(cantilever(64, 64), optimal_compliance=1.0)
    kern = generate_and_refine(p, _untrained("topodiff-ff", 64), steps=1, refine_iters=0, timing_repeats=3)
    field = generate_and_refine(p, _untrained("topodiff", 64), steps=1, refine_iters=0, timing_repeats=3)
    assert field.timings["processing_s"] >= 10 * kern.timings["processing_s"]


def test_timed_and_unique_path(tmp_path):
    calls = []
    out, t = timed(lambda: calls.append(1) or len(calls), repeats=3)
    assert out == 1 and len(calls) == 3 and t >= 0
    f = tmp_path / "r.csv"
    assert unique_path(f) == f
    f.write_text("x")
    assert unique_path(f).name == "r_1.csv"
    (tmp_path / "r_1.csv").write_text("x")
    assert unique_path(f).name == "r_2.csv"


@pytest.fixture(scope="module")
def small_data():
    return synth_dataset(3, 8, 8, seed=5)


def test_benchmark_single_record_row(small_data, tmp_path):
    one = small_data[:1]
    rows, records = run_benchmark(one, {"topodiff-ff": _untrained("topodiff-ff", 8)}, ["task-3"], [0], steps=3,
                                  out_dir=tmp_path)
    (row,) = rows
    rec = next(iter(records.values()))[0]
    assert row["status"] == "ok" and row["n"] == 1
    assert row["avg_c"] == rec["compliance"] == row["mdn_c"]
    assert row["ce_percent"] == pytest.approx(rec["ce_percent"])
    with open(next(tmp_path.glob("summary*.csv"))) as fh:
        header = next(csv.reader(fh))
    assert tuple(header) == BENCH_COLUMNS
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest[0]["dataset_sha256"] == dataset_digest(one)


def test_benchmark_seeds_std_and_append_only(small_data, tmp_path):
    models = {"topodiff-ff": _untrained("topodiff-ff", 8), "topodiff": None}
    rows, _ = run_benchmark(small_data, models, ["task-3"], seeds=[0, 1, 2, 3, 4], steps=2, out_dir=tmp_path)
    ok = [r for r in rows if r["status"] == "ok"][0]
    assert ok["n_runs"] == 5 and ok["avg_c_std"] >= 0
    assert [r for r in rows if r["model"] == "topodiff"][0]["status"] == "missing-checkpoint"
    run_benchmark(small_data, models, ["task-3"], seeds=[0], steps=2, out_dir=tmp_path)
    assert (tmp_path / "summary_1.csv").exists() and (tmp_path / "records_1.json").exists()


def test_benchmark_task3_superset(small_data, monkeypatch):
    import gentopo.pipeline as pl

    recs = [EvaluationRecord(c, 10.0, problem_id=f"p{i}") for i, c in enumerate((9.0, 40.0, 250.0))]
    monkeypatch.setattr(pl, "_records_for", lambda *a, **k: recs)
    rows, _ = run_benchmark(small_data, {"topodiff-ff": _untrained("topodiff-ff", 8)}, ["task-2", "task-3"], [0])
    t2, t3 = rows
    assert t3["ce_percent"] >= t2["ce_percent"] and t3["n"] > t2["n"]


def test_benchmark_checkpoint_path(small_data, tmp_path):
    C = KernelConditioner("topodiff-ff").fit_transform([p for p, _ in small_data])
    Y = np.stack([t for _, t in small_data])
    DiffusionModel(hidden=4, T=20, n_steps=2).fit(C, Y).save(tmp_path / "m.ckpt")
    rows, _ = run_benchmark(small_data, {"topodiff-ff": str(tmp_path / "m.ckpt")}, ["task-3"], [0], steps=2)
    assert rows[0]["status"] == "ok"


def test_benchmark_validation(small_data):
    with pytest.raises(InvalidInputError):
        run_benchmark(small_data, {}, ["task-1"])
    with pytest.raises(InvalidInputError):
        run_benchmark(small_data, {"topodiff-xl": None}, ["task-1"])
