"""Command-line interface: ``gentopo <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .exceptions import GentopoError
from .kernels import KERNEL_VARIANTS, KernelParams
from .pipeline import VARIANTS

logger = logging.getLogger("gentopo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=100, help="reverse sampling steps")
    p.add_argument("--refine-iters", type=int, default=10)
    p.add_argument("--variant", choices=VARIANTS, default="topodiff-ff")
    p.add_argument("--kernel", choices=KERNEL_VARIANTS, default="green_exp")
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--out", default=None, help="output file or directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _problem_args(p):
    p.add_argument("--problem", help="problem JSON file (overrides --nelx/--nely/--vf)")
    p.add_argument("--nelx", type=int, default=16)
    p.add_argument("--nely", type=int, default=16)
    p.add_argument("--vf", type=float, default=0.4)


def build_parser():
    common = _common()
    parser = _Parser(prog="gentopo", description="Generative topology optimisation toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("optimize", parents=[common], help="full SIMP run")
    _problem_args(p)
    p.add_argument("--iters", type=int, default=100)

    p = sub.add_parser("kernels", parents=[common], help="write a conditioning stack")
    _problem_args(p)

    p = sub.add_parser("train", parents=[common], help="train a diffusion checkpoint")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--synth", type=int, default=64, help="synthetic problems when --data is absent")
    p.add_argument("--nelx", type=int, default=16)
    p.add_argument("--nely", type=int, default=16)
    p.add_argument("--train-steps", type=int, default=2000)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-3)

    p = sub.add_parser("sample", parents=[common], help="sample a topology")
    _problem_args(p)
    p.add_argument("--model", help="checkpoint (defaults to a seeded untrained model)")

    p = sub.add_parser("refine", parents=[common], help="refine a topology with a few SIMP iterations")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--problem", help="problem JSON (default: sidecar next to --in)")

    p = sub.add_parser("evaluate", parents=[common], help="metrics for a topology")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--problem")

    p = sub.add_parser("benchmark", parents=[common], help="evaluate variants over task splits")
    p.add_argument("--data", help="dataset directory used for every split")
    p.add_argument("--synth", type=int, default=20)
    p.add_argument("--nelx", type=int, default=16)
    p.add_argument("--nely", type=int, default=16)
    p.add_argument("--models", nargs="+", required=True, metavar="VARIANT=CKPT")
    p.add_argument("--splits", nargs="+", default=["task-1"], choices=["task-1", "task-2", "task-3"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0])
    p.add_argument("--scale-fm", type=float, default=0.0)
    p.add_argument("--scale-c", type=float, default=0.0)

    p = sub.add_parser("dataset", help="dataset utilities")
    dsub = p.add_subparsers(dest="dataset_command", parser_class=_Parser)
    dsub.required = True
    s = dsub.add_parser("synth", parents=[common], help="generate a synthetic SIMP dataset")
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--nelx", type=int, default=16)
    s.add_argument("--nely", type=int, default=16)
    s.add_argument("--split", choices=["train", "ood"], default="train")
    return parser


def _kernel_params(args):
    return KernelParams(args.alpha, args.beta, args.kernel)


def _load_problem(args):
    from .io import load_problem
    from .problem import cantilever

    if getattr(args, "problem", None):
        return load_problem(args.problem)
    return cantilever(args.nelx, args.nely, args.vf)


def _out(args, default):
    from .pipeline import unique_path

    return unique_path(Path(args.out) if args.out else Path(default))


def cmd_optimize(args):
    from .io import save_topology
    from .simp import SimpConfig, run_simp

    problem = _load_problem(args)
    trace = run_simp(problem, SimpConfig(max_iters=args.iters))
    out_dir = Path(args.out or "optimize_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    from .pipeline import unique_path

    topo_path = unique_path(out_dir / "topology.bin")
    save_topology(topo_path, trace.density, problem, {"compliance": trace.final_compliance})
    trace_path = unique_path(out_dir / "trace.csv")
    with open(trace_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "compliance", "change"])
        for i, (c, ch) in enumerate(zip(trace.compliances, trace.changes), 1):
            w.writerow([i, repr(c), repr(ch)])
    print(f"compliance {trace.final_compliance:.6g} after {trace.n_iters} iterations -> {topo_path}")
    return 0


def cmd_kernels(args):
    from .io import save_tensors
    from .pipeline import conditioning_for

    problem = _load_problem(args)
    stack = conditioning_for(problem, args.variant, _kernel_params(args))
    path = _out(args, "stack.bin")
    save_tensors(path, {"stack": stack.data}, {"channels": list(stack.names), "variant": args.variant})
    print(f"{len(stack.names)} channels {list(stack.names)} -> {path}")
    return 0


def cmd_train(args):
    from .io import load_dataset, synth_dataset
    from .model import DiffusionModel
    from .pipeline import conditioning_for

    data = load_dataset(args.data) if args.data else synth_dataset(args.synth, args.nelx, args.nely, seed=args.seed)
    if not data:
        raise GentopoError("no training records")
    params = _kernel_params(args)
    C = np.stack([conditioning_for(p, args.variant, params).data for p, _ in data])
    Y = np.stack([t for _, t in data])
    model = DiffusionModel(
        variant=args.variant, hidden=args.hidden, n_steps=args.train_steps, lr=args.lr,
        sample_steps=args.steps, seed=args.seed,
    ).fit(C, Y)
    path = _out(args, "model.ckpt")
    model.save(path)
    curve = model.loss_curve_
    print(f"trained {len(curve)} steps, loss {curve[:10].mean():.4f} -> {curve[-100:].mean():.4f} -> {path}")
    return 0


def cmd_sample(args):
    from .io import save_topology
    from .model import DiffusionModel
    from .pipeline import conditioning_for

    problem = _load_problem(args)
    if args.model:
        model = DiffusionModel.load(args.model)
    else:
        logger.warning("no --model given; sampling from an untrained seeded denoiser")
        model = DiffusionModel.untrained(args.variant, problem.grid.shape, seed=args.seed)
    stack = conditioning_for(problem, args.variant, _kernel_params(args))
    topo = model.sample(stack.data[None], steps=args.steps, seed=args.seed)[0]
    path = _out(args, "sample.bin")
    save_topology(path, topo, problem, {"variant": args.variant, "steps": args.steps, "seed": args.seed})
    print(f"sample -> {path}")
    return 0


def _problem_for_topology(args):
    from .io import load_problem, sidecar_path

    src = args.problem or sidecar_path(args.inp)
    if not Path(src).exists():
        raise GentopoError(f"no problem description found (looked for {src})")
    return load_problem(src)


def cmd_refine(args):
    from .io import load_topology, save_topology
    from .pipeline import EVAL_CONFIG
    from .simp import refine

    topo, _ = load_topology(args.inp)
    problem = _problem_for_topology(args)
    trace = refine(np.clip(topo, 0, 1), problem, args.iters, EVAL_CONFIG)
    default = Path(args.inp).with_name(Path(args.inp).stem + "_refined.bin")
    path = _out(args, default)
    save_topology(path, trace.density, problem, {"refine_iters": args.iters, "compliance": trace.final_compliance})
    print(f"compliance {trace.final_compliance:.6g} after {args.iters} iterations -> {path}")
    return 0


def cmd_evaluate(args):
    from .io import load_topology
    from .metrics import evaluate_topology, manufacturable
    from .pipeline import evaluate_compliance

    topo, _ = load_topology(args.inp)
    problem = _problem_for_topology(args)
    topo = np.clip(topo, 0, 1)
    rec = evaluate_topology(topo, problem, evaluate_compliance(problem, topo))
    out = rec.to_dict() | {"manufacturable": manufacturable(rec)}
    out = {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in out.items()}
    text = json.dumps(out, indent=2, default=float)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_benchmark(args):
    from .io import load_dataset, synth_dataset
    from .pipeline import run_benchmark

    models = {}
    for spec in args.models:
        if "=" not in spec:
            raise UsageError(f"--models entries must be VARIANT=CKPT, got {spec!r}")
        variant, path = spec.split("=", 1)
        if variant not in VARIANTS:
            raise UsageError(f"unknown variant {variant!r}")
        models[variant] = path
    if args.data:
        dataset = load_dataset(args.data)
    else:
        ood = synth_dataset(args.synth, args.nelx, args.nely, split="ood", seed=args.seed + 1)
        dataset = {
            "task-1": synth_dataset(args.synth, args.nelx, args.nely, split="train", seed=args.seed + 1000),
            "task-2": ood,
            "task-3": ood,
        }
    rows, _ = run_benchmark(
        dataset, models, args.splits, args.seeds, args.steps, args.refine_iters,
        out_dir=args.out or "benchmark_out", kernel_params=_kernel_params(args),
        guidance_scales=(args.scale_fm, args.scale_c),
    )
    for row in rows:
        print(json.dumps(row, default=float))
    return 0


def cmd_dataset(args):
    from .io import save_dataset, synth_dataset

    data = synth_dataset(args.n, args.nelx, args.nely, split=args.split, seed=args.seed)
    out = args.out or f"dataset_{args.split}"
    save_dataset(out, data, {"generator": "synthetic", "split": args.split, "seed": args.seed})
    print(f"{len(data)} records -> {out}")
    return 0


COMMANDS = {
    "optimize": cmd_optimize,
    "kernels": cmd_kernels,
    "train": cmd_train,
    "sample": cmd_sample,
    "refine": cmd_refine,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "dataset": cmd_dataset,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (GentopoError, OSError, ValueError) as exc:
        print(f"gentopo: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
