"""Tensor container, problem sidecars, and dataset directories.

Tensor container layout (all integers little-endian)::

    offset 0   4 bytes   magic b"GTPT"
    offset 4   1 byte    format version (1)
    offset 5   3 bytes   zero padding
    offset 8   8 bytes   uint64 header length H
    offset 16  H bytes   UTF-8 JSON header
    then       payload   tensors back to back, each row-major, 8-byte aligned

The header is ``{"meta": {...}, "tensors": [{"name", "dtype", "shape",
"offset", "nbytes"}, ...]}`` with offsets relative to the payload start and
numpy dtype strings (``"<f8"``, ``"<i8"``, ``"|u1"``, ...). See
``docs/tensor_format.md``.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path

import numpy as np

from .exceptions import DatasetError, GentopoError, InvalidInputError
from .problem import BoundaryConditions, Grid, Loads, ProblemSpec

logger = logging.getLogger(__name__)

MAGIC = b"GTPT"
VERSION = 1
_ALLOWED = {"<f8", "<f4", "<i8", "<i4", "|u1", "|b1"}


def _dtype_str(arr):
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    s = dt.str
    if s not in _ALLOWED:
        raise InvalidInputError(f"unsupported dtype {arr.dtype} for tensor container")
    return s


def dumps_tensors(tensors, meta=None):
    entries, chunks, offset = [], [], 0
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name])
        dt = _dtype_str(arr)
        data = arr.astype(dt, copy=False).tobytes(order="C")
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        pad = (-len(data)) % 8
        chunks.append(data + b"\0" * pad)
        offset += len(data) + pad
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<B3x", VERSION) + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads_tensors(blob):
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise DatasetError("not a tensor container (bad magic)")
    (version,) = struct.unpack_from("<B", blob, 4)
    if version != VERSION:
        raise DatasetError(f"unsupported container version {version}")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    try:
        header = json.loads(blob[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"corrupt container header: {exc}") from exc
    base = 16 + hlen
    out = {}
    for e in header["tensors"]:
        if e["dtype"] not in _ALLOWED:
            raise DatasetError(f"unsupported dtype {e['dtype']!r} in container")
        start = base + e["offset"]
        if start + e["nbytes"] > len(blob):
            raise DatasetError(f"tensor {e['name']!r} truncated at byte offset {start}")
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=start)
        out[e["name"]] = arr.reshape(e["shape"]).copy()
    return out, header.get("meta", {})


def save_tensors(path, tensors, meta=None):
    Path(path).write_bytes(dumps_tensors(tensors, meta))


def load_tensors(path):
    return loads_tensors(Path(path).read_bytes())


def sidecar_path(path):
    return Path(path).with_suffix(".json")


def save_problem(path, problem):
    Path(path).write_text(json.dumps(problem.to_dict(), indent=2, sort_keys=True))


def load_problem(path):
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        return ProblemSpec.from_dict(d)
    except (KeyError, TypeError, ValueError, GentopoError) as exc:
        raise DatasetError(f"{path}: invalid problem record: {exc}") from exc


def save_topology(path, density, problem=None, meta=None):
    save_tensors(path, {"density": np.asarray(density, dtype=float)}, meta)
    if problem is not None:
        save_problem(sidecar_path(path), problem)


def load_topology(path):
    tensors, meta = load_tensors(path)
    if "density" not in tensors:
        raise DatasetError(f"{path}: no 'density' tensor")
    return tensors["density"], meta


def save_dataset(path, records, meta=None):
    """Write ``(problem, topology)`` pairs as ``<id>.bin`` + ``<id>.json`` files."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i, (problem, topo) in enumerate(records):
        stem = problem.name or f"record_{i:05d}"
        save_topology(root / f"{stem}.bin", topo, problem)
    (root / "dataset.json").write_text(json.dumps({"count": len(records), **(meta or {})}, indent=2, sort_keys=True))


def load_dataset(path):
    """Read a dataset directory; returns a list of ``(ProblemSpec, topology)``."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{path} is not a directory")
    records = []
    for js in sorted(root.glob("*.json")):
        if js.name == "dataset.json":
            continue
        problem = load_problem(js)
        bin_path = js.with_suffix(".bin")
        if not bin_path.exists():
            raise DatasetError(f"record {js.stem}: missing tensor file {bin_path.name}")
        topo, _ = load_topology(bin_path)
        if topo.shape != problem.grid.shape:
            raise DatasetError(f"record {js.stem}: topology shape {topo.shape} != grid {problem.grid.shape}")
        if topo.min() < 0 or topo.max() > 1:
            raise DatasetError(f"record {js.stem}: densities outside [0, 1]")
        records.append((problem, topo))
    if not records:
        logger.warning("dataset %s is empty", path)
    else:
        logger.info("loaded %d records from %s", len(records), path)
    return records


# --- synthetic problems -------------------------------------------------------


def _snap_vf(vf, n_elements):
    return max(1, round(vf * n_elements)) / n_elements


def _edge_load(grid, rng, angle_range, edge="right"):
    if edge == "right":
        node = grid.node_id(grid.nelx, int(rng.integers(0, grid.nely + 1)))
    else:  # top edge, interior nodes
        node = grid.node_id(int(rng.integers(1, grid.nelx)), 0)
    ang = np.deg2rad(rng.uniform(*angle_range))
    return Loads([node], [(np.cos(ang), np.sin(ang))])


def random_problem(rng, nelx=16, nely=16, split="train", name=""):
    """Draw a problem from the training generator or its out-of-distribution counterpart.

    ``train``: left edge clamped, unit load on the right edge pointing
    between -135 and -45 degrees. ``ood``: either the same support with a
    load angle in [-30, 30] degrees, or a simply supported beam (bottom
    corners) loaded on its top edge.
    """
    grid = Grid(nelx, nely)
    vf = _snap_vf(rng.uniform(0.3, 0.5), grid.n_elements)
    left = grid.node_id(0, np.arange(nely + 1))
    clamp = np.concatenate([2 * left, 2 * left + 1])
    if split == "train":
        loads = _edge_load(grid, rng, (-135, -45))
        bcs = BoundaryConditions(clamp)
    elif split == "ood":
        if rng.random() < 0.5:
            loads = _edge_load(grid, rng, (-30, 30))
            bcs = BoundaryConditions(clamp)
        else:
            loads = _edge_load(grid, rng, (-100, -80), edge="top")
            bl, br = grid.node_id(0, nely), grid.node_id(nelx, nely)
            bcs = BoundaryConditions([2 * bl, 2 * bl + 1, 2 * br + 1])
    else:
        raise InvalidInputError(f"unknown synthetic split {split!r}")
    return ProblemSpec(grid, loads, bcs, vf, name=name)


def binarize_to_volume(density, vf):
    """Keep the ``round(vf * n)`` densest elements (stable ordering) as solid."""
    x = np.asarray(density, dtype=float)
    k = int(round(vf * x.size))
    out = np.zeros(x.size)
    out[np.argsort(-x.ravel(), kind="stable")[:k]] = 1.0
    return out.reshape(x.shape)


def synth_dataset(n, nelx=16, nely=16, split="train", seed=0, config=None):
    """Generate ``n`` problems and their SIMP optima (binarised at the exact volume)."""
    from . import fea
    from .simp import SimpConfig, run_simp

    config = config or SimpConfig(max_iters=100)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        problem = random_problem(rng, nelx, nely, split, name=f"{split}_{seed}_{i:05d}")
        trace = run_simp(problem, config)
        topo = binarize_to_volume(trace.density, problem.vf_target)
        _, c_opt = fea.analyze(problem, topo, config.penal, config.material, config.solver, config.solver_tol)
        problem = ProblemSpec(problem.grid, problem.loads, problem.bcs, problem.vf_target, c_opt, problem.name)
        out.append((problem, topo))
    return out
